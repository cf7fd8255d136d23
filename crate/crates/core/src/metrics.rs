//! Relative L2 error and mean absolute error, plus the per-field report
//! produced by evaluation.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `||pred - truth||_2 / ||truth||_2` over all entries of a field group.
/// A zero-norm truth is reported as an error, never clamped.
pub fn rl2<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::argument(format!(
            "rl2: shape mismatch {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let d = p.f64() - t.f64();
        num += d * d;
        den += t.f64() * t.f64();
    }
    if den == 0.0 {
        return Err(Error::numeric("rl2: truth field has zero norm"));
    }
    Ok((num / den).sqrt())
}

/// Mean absolute deviation over all entries.
pub fn mae<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::argument(format!(
            "mae: shape mismatch {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| (p.f64() - t.f64()).abs())
        .sum();
    Ok(sum / n as f64)
}

/// One named group of output channels that forms a field for metric
/// purposes (e.g. velocity = channels 0..3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldGroup {
    pub name: String,
    pub channels: std::ops::Range<usize>,
}

/// How output channels split into fields, plus an optional total row over
/// the concatenation of all groups (the per-time-step layout: the groups
/// are the steps and the total covers every channel at once).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldGrouping {
    pub fields: Vec<FieldGroup>,
    pub total: Option<String>,
}

impl FieldGrouping {
    /// One group spanning all channels.
    pub fn single(name: &str, channels: usize) -> Self {
        FieldGrouping {
            fields: vec![FieldGroup { name: name.into(), channels: 0..channels }],
            total: None,
        }
    }

    /// Parse `"name=a..b,name2=c..d[;total=name]"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut fields = Vec::new();
        let mut total = None;
        for part in s.split(';') {
            if let Some(t) = part.strip_prefix("total=") {
                total = Some(t.to_string());
                continue;
            }
            for item in part.split(',').filter(|p| !p.is_empty()) {
                let (name, range) = item
                    .split_once('=')
                    .ok_or_else(|| Error::argument(format!("field grouping: bad item '{item}'")))?;
                let (a, b) = range
                    .split_once("..")
                    .ok_or_else(|| Error::argument(format!("field grouping: bad range '{range}'")))?;
                let a: usize = a
                    .parse()
                    .map_err(|_| Error::argument(format!("field grouping: bad number '{a}'")))?;
                let b: usize = b
                    .parse()
                    .map_err(|_| Error::argument(format!("field grouping: bad number '{b}'")))?;
                if b <= a {
                    return Err(Error::argument(format!("field grouping: empty range '{range}'")));
                }
                fields.push(FieldGroup { name: name.to_string(), channels: a..b });
            }
        }
        if fields.is_empty() {
            return Err(Error::argument("field grouping: no fields"));
        }
        Ok(FieldGrouping { fields, total })
    }

    pub fn format(&self) -> String {
        let mut s = self
            .fields
            .iter()
            .map(|f| format!("{}={}..{}", f.name, f.channels.start, f.channels.end))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(t) = &self.total {
            s.push_str(&format!(";total={t}"));
        }
        s
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for f in &self.fields {
            if f.channels.end > channels {
                return Err(Error::argument(format!(
                    "field grouping: group '{}' references channel {} but output has {channels}",
                    f.name,
                    f.channels.end - 1
                )));
            }
        }
        Ok(())
    }
}

/// Per-field RL2 and MAE plus run metadata.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Rows of (field name, rl2, mae) in grouping order; the total row, when
    /// present, comes last.
    pub rows: Vec<(String, f64, f64)>,
    pub wall_time_s: f64,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn get(&self, field: &str) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .find(|(name, _, _)| name == field)
            .map(|&(_, r, m)| (r, m))
    }

    /// Mean RL2 across the non-total field rows.
    pub fn mean_rl2(&self) -> f64 {
        let fields: Vec<f64> = self.rows.iter().map(|&(_, r, _)| r).collect();
        fields.iter().sum::<f64>() / fields.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("field,rl2,mae,wall_time_s,config_fingerprint\n");
        for (name, r, m) in &self.rows {
            out.push_str(&format!(
                "{name},{r},{m},{:.3},{}\n",
                self.wall_time_s, self.config_fingerprint
            ));
        }
        out
    }
}

/// Slice the channel group of a `[N x C]` tensor.
pub fn slice_channels<T: Real>(t: &Tensor<T>, range: &std::ops::Range<usize>) -> Tensor<T> {
    let (n, c) = (t.rows(), t.cols());
    debug_assert!(range.end <= c);
    let w = range.end - range.start;
    let mut data = Vec::with_capacity(n * w);
    for i in 0..n {
        data.extend_from_slice(&t.data()[i * c + range.start..i * c + range.end]);
    }
    Tensor::matrix(n, w, data).unwrap()
}
