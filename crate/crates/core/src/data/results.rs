use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::{Error, Result};

/// Keys every run summary carries, `null` when a run does not measure them.
pub const SUMMARY_KEYS: [&str; 3] = ["auc", "tpr_at_fpr_5", "robust_accuracy"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ResultTable {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

/// ROC curve points `(fpr, tpr, threshold)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curve {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub tables: Vec<ResultTable>,
    pub curves: Vec<Curve>,
    pub summary: BTreeMap<String, Value>,
    /// Per-sample detection records.
    pub verdicts: Option<Value>,
    /// Fully resolved run configuration.
    pub config: Option<Value>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    pub force: bool,
    /// Test hook: abort after this many files have been written.
    pub fail_after_files: Option<usize>,
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

/// Deterministic SVG line plot of a ROC curve with the chance diagonal.
pub fn roc_svg(curve: &Curve) -> String {
    const S: f64 = 300.0;
    const M: f64 = 40.0;
    let mut s = String::new();
    let size = S + 2.0 * M;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect x="{M}" y="{M}" width="{S}" height="{S}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{M}" stroke="gray" stroke-dasharray="4 4"/>"#,
        M + S,
        M + S
    );
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|&(f, t, _)| format!("{:.2},{:.2}", M + f * S, M + (1.0 - t) * S))
        .collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">FPR</text>"#, M + S / 2.0, size - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})">TPR</text>"#,
        M + S / 2.0,
        M + S / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="13">{}</text>"#, size / 2.0, xml_escape(&curve.name));
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::Config(format!("invalid output name `{name}`")));
    }
    Ok(())
}

/// Every file of a run, in write order.
fn render(out: &RunOutput) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for t in &out.tables {
        check_name(&t.name)?;
        files.push((format!("{}.csv", t.name), csv_bytes(&t.header, &t.rows)?));
    }
    for c in &out.curves {
        check_name(&c.name)?;
        let header = ["fpr", "tpr", "threshold"].map(String::from);
        let rows: Vec<Vec<String>> = c.points.iter().map(|&(f, t, th)| vec![fmt_num(f), fmt_num(t), fmt_num(th)]).collect();
        files.push((format!("roc_{}.csv", c.name), csv_bytes(&header, &rows)?));
        files.push((format!("roc_{}.svg", c.name), roc_svg(c).into_bytes()));
    }
    let mut summary = out.summary.clone();
    for k in SUMMARY_KEYS {
        summary.entry(k.to_string()).or_insert(Value::Null);
    }
    files.push(("summary.json".into(), serde_json::to_vec_pretty(&summary)?));
    if let Some(v) = &out.verdicts {
        files.push(("verdicts.json".into(), serde_json::to_vec_pretty(v)?));
    }
    if let Some(c) = &out.config {
        files.push(("config.json".into(), serde_json::to_vec_pretty(c)?));
    }
    Ok(files)
}

/// Writes a run directory `root/run_id` through a staging directory that is
/// renamed into place, so readers never see a partially written run.
pub fn write_results(root: &Path, run_id: &str, out: &RunOutput, opts: WriteOptions) -> Result<PathBuf> {
    check_name(run_id)?;
    let target = root.join(run_id);
    if target.exists() && !opts.force {
        return Err(Error::RunExists(target));
    }
    let files = render(out)?;
    fs::create_dir_all(root)?;
    let staging = root.join(format!(".{run_id}.staging"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let staged = (|| -> Result<()> {
        for (i, (name, bytes)) in files.iter().enumerate() {
            if opts.fail_after_files == Some(i) {
                return Err(Error::InjectedFailure(i));
            }
            fs::write(staging.join(name), bytes)?;
        }
        Ok(())
    })();
    if let Err(e) = staged {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if target.exists() {
        let old = root.join(format!(".{run_id}.old"));
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(&target, &old)?;
        fs::rename(&staging, &target)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&staging, &target)?;
    }
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_per_rfc4180() {
        let b = csv_bytes(&["a".into(), "b".into()], &[vec!["x,y".into(), "say \"hi\"".into()]]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
    }

    #[test]
    fn svg_is_deterministic() {
        let c = Curve {
            name: "pgd".into(),
            points: vec![(0.0, 0.0, f64::INFINITY), (0.5, 0.9, 0.3), (1.0, 1.0, 0.0)],
        };
        assert_eq!(roc_svg(&c), roc_svg(&c));
        assert!(roc_svg(&c).contains("polyline"));
    }
}
