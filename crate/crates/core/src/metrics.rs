//! Registration error measures against known ground truth.

use crate::error::{Error, Result};
use crate::Vec3;

/// `‖v̂_i - u_i‖` for every point.
pub fn pointwise_error(deformed: &[Vec3], ground_truth: &[Vec3]) -> Result<Vec<f64>> {
    if deformed.len() != ground_truth.len() {
        return Err(Error::DimensionMismatch {
            what: "ground-truth points",
            expected: deformed.len(),
            actual: ground_truth.len(),
        });
    }
    Ok(deformed.iter().zip(ground_truth).map(|(a, b)| (a - b).norm()).collect())
}

pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    Ok((errors.iter().map(|d| d * d).sum::<f64>() / errors.len() as f64).sqrt())
}

/// RMSE restricted to the points selected by `mask`.
pub fn masked_rmse(errors: &[f64], mask: &[bool]) -> Result<f64> {
    if errors.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            what: "mask",
            expected: errors.len(),
            actual: mask.len(),
        });
    }
    let kept: Vec<f64> = errors.iter().zip(mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    rmse(&kept)
}

/// Ground-truth displacement of one source point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow {
    pub index: usize,
    pub displacement: Vec3,
}

/// RMSE of `v̂_i` against `v_i + t_i` over the points that carry a flow.
pub fn scene_flow_rmse(deformed: &[Vec3], source: &[Vec3], flows: &[Flow]) -> Result<f64> {
    if deformed.len() != source.len() {
        return Err(Error::DimensionMismatch {
            what: "deformed vs source points",
            expected: source.len(),
            actual: deformed.len(),
        });
    }
    let mut errors = Vec::with_capacity(flows.len());
    for f in flows {
        if f.index >= source.len() {
            return Err(Error::InvalidInput(format!(
                "flow index {} out of range ({} points)",
                f.index,
                source.len()
            )));
        }
        errors.push((deformed[f.index] - (source[f.index] + f.displacement)).norm());
    }
    rmse(&errors)
}

/// Fraction of source points whose ground-truth counterpart is present.
pub fn overlap_ratio(membership: &[bool]) -> Result<f64> {
    if membership.is_empty() {
        return Err(Error::Empty("membership mask"));
    }
    Ok(membership.iter().filter(|&&m| m).count() as f64 / membership.len() as f64)
}

/// Parses `i tx ty tz` lines. Blank lines and `#` comments are skipped.
pub fn parse_flows(text: &str) -> std::result::Result<Vec<Flow>, (usize, String)> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err((n + 1, format!("expected `i tx ty tz`, got {} fields", fields.len())));
        }
        let index = fields[0]
            .parse()
            .map_err(|e| (n + 1, format!("bad index `{}`: {e}", fields[0])))?;
        let mut t = [0.0f64; 3];
        for (k, f) in fields[1..].iter().enumerate() {
            t[k] = f.parse().map_err(|e| (n + 1, format!("bad number `{f}`: {e}")))?;
            if !t[k].is_finite() {
                return Err((n + 1, format!("non-finite flow component `{f}`")));
            }
        }
        out.push(Flow {
            index,
            displacement: Vec3::from(t),
        });
    }
    Ok(out)
}
