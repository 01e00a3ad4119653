//! Cost/accuracy table over a run's evaluation checkpoints.

use serde::{Deserialize, Serialize};

use crate::evalcost::{Cents, EvalReport};

/// Accuracy after one training event, with cumulative spend at that point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub label: String,
    pub training_cents: i64,
    pub labeling_cents: i64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub checkpoints: Vec<Checkpoint>,
    pub total_cents: i64,
}

fn ap_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn signed_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:+.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

impl RunReport {
    const HEADER: [&'static str; 6] = ["checkpoint", "training_usd", "labeling_usd", "novel_ap", "known_ap", "forgetting"];

    fn rows(&self) -> Vec<[String; 6]> {
        self.checkpoints
            .iter()
            .map(|c| {
                [
                    c.label.clone(),
                    Cents(c.training_cents).to_string(),
                    Cents(c.labeling_cents).to_string(),
                    ap_cell(c.eval.novel_average),
                    ap_cell(c.eval.known_average),
                    signed_cell(c.eval.forgetting),
                ]
            })
            .collect()
    }

    /// Tab-separated, AP columns in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = Self::HEADER.join("\t");
        out.push('\n');
        for row in self.rows() {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let titles = ["Checkpoint", "Training $", "Labeling $", "Novel AP", "Known AP", "Forgetting"];
        let rows = self.rows();
        let widths: Vec<usize> = (0..6)
            .map(|i| rows.iter().map(|r| r[i].len()).chain([titles[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i == 0 {
                    s.push_str(&format!("{c:<w$}", w = widths[i]));
                } else {
                    s.push_str(&format!("  {c:>w$}", w = widths[i]));
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = format!("Run {}\n", self.run_id);
        out.push_str(&line(&titles.map(String::from)));
        out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
        for r in &rows {
            out.push_str(&line(r));
        }
        out.push_str(&format!("Total spend: {}\n", Cents(self.total_cents)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalcost::ApMode;

    fn eval(novel: Option<f64>, known: f64, forgetting: Option<f64>) -> EvalReport {
        EvalReport {
            mode: ApMode::Ap50,
            images: 1,
            categories: vec![],
            novel_average: novel,
            known_average: Some(known),
            forgetting,
        }
    }

    #[test]
    fn tsv_has_one_row_per_checkpoint() {
        let r = RunReport {
            run_id: "r".into(),
            checkpoints: vec![
                Checkpoint {
                    label: "baseline".into(),
                    training_cents: 0,
                    labeling_cents: 0,
                    eval: eval(None, 0.299, None),
                },
                Checkpoint {
                    label: "update".into(),
                    training_cents: 55,
                    labeling_cents: 0,
                    eval: eval(Some(0.5), 0.266, Some(-0.033)),
                },
            ],
            total_cents: 56,
        };
        let tsv = r.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "checkpoint\ttraining_usd\tlabeling_usd\tnovel_ap\tknown_ap\tforgetting");
        assert_eq!(lines[1], "baseline\t$0.00\t$0.00\t-\t29.9\t-");
        assert_eq!(lines[2], "update\t$0.55\t$0.00\t50.0\t26.6\t-3.3");
        let pretty = r.to_pretty();
        assert!(pretty.contains("Known AP"));
        assert!(pretty.contains("Total spend: $0.56"));
    }
}
