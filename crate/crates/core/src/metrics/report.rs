use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Column headers of the comparison table.
pub const COLUMNS: [&str; 7] = ["BERTScore-P", "BERTScore-R", "BERTScore-F1", "SBERT-cos", "SMS", "FPS", "AA"];

pub const SMS_TRANSFORM: &str = "1/(1+emd)";

/// Everything that makes two reports comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub provider: String,
    pub sms_transform: String,
    pub bertscore_baseline: Option<f64>,
    pub lexicon_version: u32,
    pub max_new_tokens: Option<usize>,
}

impl EvalSettings {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    pub response: String,
    pub reference: String,
}

/// One table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub bertscore_p: f64,
    pub bertscore_r: f64,
    pub bertscore_f1: f64,
    pub sbert_cos: f64,
    pub sms: f64,
    /// Absent for ingested response sets, which are never timed.
    pub fps: Option<f64>,
    pub aa: f64,
    pub n_samples: usize,
    pub settings: EvalSettings,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<String>,
    #[serde(default)]
    pub responses: Vec<ResponseRecord>,
}

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.bertscore_p),
            Some(self.bertscore_r),
            Some(self.bertscore_f1),
            Some(self.sbert_cos),
            Some(self.sms),
            self.fps,
            Some(self.aa),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("report {:?}: {m}", self.model)));
        let cos = [self.bertscore_p, self.bertscore_r, self.bertscore_f1, self.sbert_cos];
        if self.settings.bertscore_baseline.is_none() && cos.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return bad("cosine-family score outside [-1, 1]".into());
        }
        if !(self.sms > 0.0 && self.sms <= 1.0) {
            return bad(format!("sms {} outside (0, 1]", self.sms));
        }
        if !(0.0..=1.0).contains(&self.aa) {
            return bad(format!("aa {} outside [0, 1]", self.aa));
        }
        if self.fps.is_some_and(|f| !(f > 0.0 && f.is_finite())) {
            return bad("fps must be positive".into());
        }
        if self.fingerprint != self.settings.fingerprint() {
            return bad("fingerprint does not match settings".into());
        }
        Ok(())
    }

    /// The report without fps and hardware, for determinism comparisons.
    pub fn deterministic_part(&self) -> MetricReport {
        MetricReport {
            fps: None,
            hardware: None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<MetricReport> {
        let r: MetricReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}

/// Reports must share provider, SMS transform, baseline and lexicon.
pub fn check_comparable(reports: &[MetricReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("no reports to compare"));
    };
    for r in &reports[1..] {
        let (a, b) = (&first.settings, &r.settings);
        if a.provider != b.provider
            || a.sms_transform != b.sms_transform
            || a.bertscore_baseline != b.bertscore_baseline
            || a.lexicon_version != b.lexicon_version
        {
            return Err(Error::invalid(format!(
                "reports {:?} and {:?} were scored under different settings",
                first.model, r.model
            )));
        }
    }
    Ok(())
}

/// Per column, the indices of rows holding the maximum value.
pub fn best_rows(reports: &[MetricReport]) -> Vec<Vec<usize>> {
    (0..COLUMNS.len())
        .map(|c| {
            let vals: Vec<Option<f64>> = reports.iter().map(|r| r.values()[c]).collect();
            let best = vals.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..reports.len()).filter(|&i| vals[i] == Some(best)).collect()
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_string(), |x| format!("{x:.3}"))
}

/// Aligned text table; the best value of each column is wrapped in `**`.
pub fn render_table(reports: &[MetricReport]) -> Result<String> {
    check_comparable(reports)?;
    let best = best_rows(reports);
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Model").chain(COLUMNS).map(String::from).collect()];
    for (i, r) in reports.iter().enumerate() {
        let mut row = vec![r.model.clone()];
        for (c, v) in r.values().into_iter().enumerate() {
            let s = cell(v);
            row.push(if best[c].contains(&i) { format!("**{s}**") } else { s });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (k, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if k == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    Ok(out)
}

/// CSV with full precision; fps is empty for untimed rows.
pub fn render_csv(reports: &[MetricReport]) -> Result<String> {
    check_comparable(reports)?;
    let mut out = String::from("model,bertscore_p,bertscore_r,bertscore_f1,sbert_cos,sms,fps,aa\n");
    for r in reports {
        let name = if r.model.contains([',', '"']) {
            format!("\"{}\"", r.model.replace('"', "\"\""))
        } else {
            r.model.clone()
        };
        let vals: Vec<String> = r.values().iter().map(|v| v.map_or(String::new(), |x| x.to_string())).collect();
        out.push_str(&format!("{name},{}\n", vals.join(",")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(model: &str, v: [f64; 7], fps: bool) -> MetricReport {
        let settings = EvalSettings {
            provider: "hash(seed=0,dim=8)".into(),
            sms_transform: SMS_TRANSFORM.into(),
            bertscore_baseline: None,
            lexicon_version: 1,
            max_new_tokens: Some(32),
        };
        MetricReport {
            model: model.into(),
            bertscore_p: v[0],
            bertscore_r: v[1],
            bertscore_f1: v[2],
            sbert_cos: v[3],
            sms: v[4],
            fps: fps.then_some(v[5]),
            aa: v[6],
            n_samples: 6,
            fingerprint: settings.fingerprint(),
            settings,
            hardware: None,
            responses: vec![],
        }
    }

    #[test]
    fn json_roundtrip() {
        let r = row("a", [0.1, 0.2, 0.3, 0.4, 0.5, 2.0, 0.5], true);
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn two_rows_best_marked() {
        let a = row("a", [0.1, 0.9, 0.3, 0.4, 0.5, 2.0, 0.5], true);
        let b = row("b", [0.2, 0.8, 0.3, 0.3, 0.6, 1.0, 0.5], false);
        let t = render_table(&[a, b]).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].contains("**0.900**") && lines[2].contains("**2.000**"));
        assert!(lines[3].contains("**0.200**") && lines[3].contains("—"));
        // ties are marked on both rows
        assert!(lines[2].contains("**0.300**") && lines[3].contains("**0.300**"));
    }

    #[test]
    fn incomparable_rejected() {
        let a = row("a", [0.1; 7], true);
        let mut b = row("b", [0.1; 7], true);
        b.settings.provider = "other".into();
        assert!(render_table(&[a, b]).is_err());
    }

    #[test]
    fn csv_empty_fps() {
        let csv = render_csv(&[row("gpt-4o", [0.1, 0.2, 0.3, 0.4, 0.5, 0.0, 0.5], false)]).unwrap();
        assert!(csv.lines().nth(1).unwrap().contains("0.5,,0.5"));
    }
}
