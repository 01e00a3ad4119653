//! Dollar cost ledger. Quantities, rates and amounts are exact rationals;
//! only the grand total is rounded to cents (half to even).

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Exact non-negative-or-signed rational amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quantity(pub Ratio<i128>);

impl Quantity {
    pub fn integer(n: i128) -> Self {
        Quantity(Ratio::from_integer(n))
    }

    pub fn ratio(num: i128, den: i128) -> Self {
        Quantity(Ratio::new(num, den))
    }

    /// Decimal value rounded to 1e-9.
    pub fn from_decimal(x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::InvalidData(format!("non-finite quantity {x}")));
        }
        Ok(Quantity(Ratio::new((x * 1e9).round() as i128, 1_000_000_000)))
    }

    pub fn to_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < Ratio::from_integer(0)
    }

    /// Round to whole cents, ties to even.
    pub fn to_cents(self) -> Cents {
        let scaled = self.0 * Ratio::from_integer(100);
        let floor = scaled.floor();
        let frac = scaled - floor;
        let half = Ratio::new(1, 2);
        let mut cents = *floor.numer();
        if frac > half || (frac == half && cents % 2 != 0) {
            cents += 1;
        }
        Cents(cents as i64)
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidData(format!("bad rational {s:?}"));
        match s.split_once('/') {
            Some((n, d)) => {
                let d: i128 = d.trim().parse().map_err(|_| bad())?;
                if d == 0 {
                    return Err(bad());
                }
                Ok(Quantity(Ratio::new(n.trim().parse().map_err(|_| bad())?, d)))
            }
            None => Ok(Quantity::integer(s.trim().parse().map_err(|_| bad())?)),
        }
    }
}

impl Serialize for Quantity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cents(pub i64);

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        write!(f, "{sign}${}.{:02}", self.0.abs() / 100, self.0.abs() % 100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    BoxLabel,
    GpuHour,
    ImageInspection,
    LlmCall,
}

impl CostKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::BoxLabel => "box_label",
            CostKind::GpuHour => "gpu_hour",
            CostKind::ImageInspection => "image_inspection",
            CostKind::LlmCall => "llm_call",
        }
    }

    /// Whether the kind counts as labeling (human) cost rather than training.
    pub fn is_labeling(self) -> bool {
        matches!(self, CostKind::BoxLabel | CostKind::ImageInspection)
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box_label" => Ok(CostKind::BoxLabel),
            "gpu_hour" => Ok(CostKind::GpuHour),
            "image_inspection" => Ok(CostKind::ImageInspection),
            "llm_call" => Ok(CostKind::LlmCall),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Dollar rates per unit. Decimal values from config are taken to 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostRates {
    pub box_label: f64,
    pub gpu_hour: f64,
    pub image_inspection: f64,
    pub llm_call: f64,
    /// One-off charge noted per run for language-model use.
    pub llm_flat_note: f64,
}

impl Default for CostRates {
    fn default() -> Self {
        CostRates {
            box_label: 0.06,
            gpu_hour: 1.10,
            image_inspection: 0.05,
            llm_call: 0.0,
            llm_flat_note: 0.01,
        }
    }
}

impl CostRates {
    pub fn rate(&self, kind: CostKind) -> Result<Quantity> {
        Quantity::from_decimal(match kind {
            CostKind::BoxLabel => self.box_label,
            CostKind::GpuHour => self.gpu_hour,
            CostKind::ImageInspection => self.image_inspection,
            CostKind::LlmCall => self.llm_call,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.box_label, self.gpu_hour, self.image_inspection, self.llm_call, self.llm_flat_note] {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("cost rate must be >= 0, got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub kind: CostKind,
    pub quantity: Quantity,
    pub unit_rate: Quantity,
    pub dollars: Quantity,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CostLedger {
    pub rates: CostRates,
    pub entries: Vec<CostEntry>,
}

impl CostLedger {
    pub fn new(rates: CostRates) -> Self {
        CostLedger {
            rates,
            entries: Vec::new(),
        }
    }

    /// Append `quantity` units of `kind` at the configured rate.
    pub fn charge(&mut self, kind: CostKind, quantity: Quantity, stage: &str) -> Result<&CostEntry> {
        if quantity.is_negative() {
            return Err(Error::InvalidCount(format!("negative quantity {quantity}")));
        }
        let unit_rate = self.rates.rate(kind)?;
        self.entries.push(CostEntry {
            kind,
            quantity,
            unit_rate,
            dollars: Quantity(quantity.0 * unit_rate.0),
            stage: stage.to_string(),
            note: None,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    /// `charge` with the kind given by name.
    pub fn charge_named(&mut self, kind: &str, quantity: Quantity, stage: &str) -> Result<&CostEntry> {
        self.charge(kind.parse()?, quantity, stage)
    }

    /// The flat language-model note, recorded once per run.
    pub fn note_llm(&mut self, stage: &str) -> Result<&CostEntry> {
        let amount = Quantity::from_decimal(self.rates.llm_flat_note)?;
        self.entries.push(CostEntry {
            kind: CostKind::LlmCall,
            quantity: Quantity::integer(1),
            unit_rate: amount,
            dollars: amount,
            stage: stage.to_string(),
            note: Some("flat".into()),
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn exact_total(&self) -> Quantity {
        Quantity(self.entries.iter().map(|e| e.dollars.0).sum())
    }

    pub fn total(&self) -> Cents {
        self.exact_total().to_cents()
    }

    pub fn total_where(&self, keep: impl Fn(&CostEntry) -> bool) -> Cents {
        Quantity(self.entries.iter().filter(|e| keep(e)).map(|e| e.dollars.0).sum()).to_cents()
    }

    pub fn labeling_total(&self) -> Cents {
        self.total_where(|e| e.kind.is_labeling())
    }

    pub fn training_total(&self) -> Cents {
        self.total_where(|e| e.kind == CostKind::GpuHour)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e)?).map_err(|err| Error::io("<ledger>", err))?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead, rates: CostRates) -> Result<Self> {
        let mut ledger = CostLedger::new(rates);
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<ledger>", e))?;
            if !line.trim().is_empty() {
                ledger.entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(ledger)
    }
}
