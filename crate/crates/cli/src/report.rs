//! Variant comparison and training curves from `metrics.csv` files.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use dyngate_core::{Error, Result};

/// One parsed `metrics.csv`.
#[derive(Debug, Clone)]
pub struct Run {
    pub label: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Run {
    pub fn parse(label: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty metrics file".into(),
        })?;
        let header: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
        for required in ["epoch", "p", "val_acc", "unseen_acc", "mac_ratio"] {
            if !header.iter().any(|h| h == required) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("metrics header lacks column '{required}'"),
                });
            }
        }
        let mut rows = Vec::new();
        for (no, line) in lines {
            let row = line
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: no + 1,
                        msg: format!("'{}' is not a number", v.trim()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != header.len() {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("{} fields, header has {}", row.len(), header.len()),
                });
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 2,
                msg: "metrics file has no epochs".into(),
            });
        }
        Ok(Self {
            label: label.to_string(),
            header,
            rows,
        })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn get(&self, row: usize, name: &str) -> f64 {
        self.col(name).map_or(f64::NAN, |c| self.rows[row][c])
    }

    /// Earliest epoch with the highest validation accuracy.
    pub fn best(&self) -> usize {
        let c = self.col("val_acc").unwrap();
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r[c] > self.rows[best][c] {
                best = i;
            }
        }
        best
    }

    pub fn targets(&self) -> Vec<String> {
        self.header
            .iter()
            .filter_map(|h| h.strip_prefix("acc_").map(String::from))
            .collect()
    }

    /// Mean channel and spatial density over gated layers; 1.0 without gates.
    pub fn mean_density(&self, row: usize) -> (f64, f64) {
        let mean = |suffix: &str| {
            let vals: Vec<f64> = self
                .header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.ends_with(suffix))
                .map(|(i, _)| self.rows[row][i])
                .collect();
            if vals.is_empty() {
                1.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        (mean(".density_c"), mean(".density_s"))
    }
}

/// Labels each run by its parent directory, falling back to the full path on clashes.
pub fn labels(paths: &[PathBuf]) -> Vec<String> {
    let short: Vec<String> = paths
        .iter()
        .map(|p| {
            p.parent()
                .and_then(Path::file_name)
                .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
        })
        .collect();
    short
        .iter()
        .zip(paths)
        .map(|(s, p)| {
            if short.iter().filter(|t| *t == s).count() > 1 {
                p.display().to_string()
            } else {
                s.clone()
            }
        })
        .collect()
}

pub fn comparison_csv(runs: &[Run]) -> String {
    let mut targets: Vec<String> = Vec::new();
    for r in runs {
        for t in r.targets() {
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
    }
    let mut s = String::from("run,epochs,best_epoch,best_val_acc");
    for t in &targets {
        write!(s, ",acc_{t}").unwrap();
    }
    s.push_str(",unseen_acc,mac_ratio,density_c,density_s,final_unseen_acc\n");
    for r in runs {
        let b = r.best();
        let last = r.rows.len() - 1;
        write!(s, "{},{},{},{:.6}", csv_field(&r.label), r.rows.len(), b, r.get(b, "val_acc")).unwrap();
        for t in &targets {
            match r.col(&format!("acc_{t}")) {
                Some(c) => write!(s, ",{:.6}", r.rows[b][c]).unwrap(),
                None => s.push(','),
            }
        }
        let (dc, ds) = r.mean_density(b);
        writeln!(
            s,
            ",{:.6},{:.6},{dc:.6},{ds:.6},{:.6}",
            r.get(b, "unseen_acc"),
            r.get(b, "mac_ratio"),
            r.get(last, "unseen_acc")
        )
        .unwrap();
    }
    s
}

pub fn curves_csv(runs: &[Run]) -> String {
    let mut s = String::from("run,epoch,p,val_acc,unseen_acc,mac_ratio,density_c,density_s\n");
    for r in runs {
        for i in 0..r.rows.len() {
            let (dc, ds) = r.mean_density(i);
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{dc:.6},{ds:.6}",
                csv_field(&r.label),
                r.get(i, "epoch"),
                r.get(i, "p"),
                r.get(i, "val_acc"),
                r.get(i, "unseen_acc"),
                r.get(i, "mac_ratio"),
            )
            .unwrap();
        }
    }
    s
}

/// gnuplot script drawing accuracy and density curves from `curves.csv`.
pub fn gnuplot_script(runs: &[Run]) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'epoch'\n\
         set terminal pngcairo size 1200,500\nset output 'curves.png'\nset multiplot layout 1,2\n",
    );
    for (title, col) in [("unseen accuracy", 5), ("channel density", 7)] {
        writeln!(s, "set title '{title}'").unwrap();
        let plots: Vec<String> = runs
            .iter()
            .map(|r| {
                let label = r.label.replace('\'', "");
                format!("'curves.csv' using (strcol(1) eq '{label}' ? $2 : NaN):{col} with lines title '{label}'")
            })
            .collect();
        writeln!(s, "plot {}", plots.join(", \\\n     ")).unwrap();
    }
    s.push_str("unset multiplot\n");
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const METRICS: &str = "epoch,p,task_loss,bound_low,bound_up,total_loss,train_acc,val_acc,acc_sketch,unseen_acc,b0.density_c,b0.density_s,mac_ratio
0,1.000000,1.3,0,0,1.3,0.25,0.500000,0.4,0.4,0.7,0.9,0.8
1,0.951229,1.1,0,0,1.1,0.5,0.750000,0.6,0.6,0.5,0.7,0.6
2,0.904837,1.0,0,0,1.0,0.6,0.750000,0.7,0.7,0.3,0.5,0.4
";

    #[test]
    fn best_is_earliest_maximum() {
        let r = Run::parse("x", METRICS).unwrap();
        assert_eq!(r.best(), 1);
        assert_eq!(r.mean_density(1), (0.5, 0.7));
    }

    #[test]
    fn comparison_has_one_row_per_run() {
        let a = Run::parse("a", METRICS).unwrap();
        let b = Run::parse("b", METRICS).unwrap();
        let csv = comparison_csv(&[a, b]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "a,3,1,0.750000,0.600000,0.600000,0.600000,0.500000,0.700000,0.700000");
    }

    #[test]
    fn malformed_metrics_are_rejected() {
        assert!(Run::parse("x", "").is_err());
        assert!(Run::parse("x", "epoch,p\n0,1\n").is_err());
        let bad = METRICS.replace("0.750000,0.6", "oops,0.6");
        assert!(matches!(Run::parse("x", &bad), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn clashing_labels_fall_back_to_paths() {
        let p = vec![PathBuf::from("a/run/metrics.csv"), PathBuf::from("b/run/metrics.csv"), PathBuf::from("c/x/metrics.csv")];
        assert_eq!(labels(&p), vec!["a/run/metrics.csv", "b/run/metrics.csv", "x"]);
    }
}
