//! IoU scores over amodal and occluded regions, and routing diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertCounter;
use crate::model::{Model, Prediction};
use crate::shape_encoder::draw_eta;
use crate::synth_data::{sample_seed, Dataset, Mask, ShapeFamily};

/// `|a ∧ b| / |a ∨ b|`, or `None` when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "iou: {}×{} vs {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_bytes().iter().zip(b.as_bytes()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou_full: f64,
    /// `None` when no sample has an occluded region.
    pub miou_occ: Option<f64>,
    pub n_samples: usize,
    pub n_occluded_samples: usize,
    /// Gate-mass share per expert.
    pub utilization: Vec<f64>,
    /// Entropy of `utilization` divided by `ln K` (1 for a single expert).
    pub utilization_entropy_normalized: f64,
    pub purity: f64,
    /// Samples per (primary expert, shape family).
    pub family_histogram: Vec<[usize; ShapeFamily::COUNT]>,
}

/// What the metrics need from one evaluated sample.
#[derive(Clone, Debug)]
pub struct SampleOutcome<'a> {
    pub family: ShapeFamily,
    pub predicted: Mask,
    pub visible: &'a Mask,
    pub amodal: &'a Mask,
    pub gate: Vec<f64>,
    /// Expert the sample is attributed to for purity.
    pub primary: usize,
}

pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() <= 1 {
        return 1.0;
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.recip().ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

pub fn summarize(outcomes: &[SampleOutcome<'_>], experts: usize) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let n = outcomes.len();
    let (mut full_sum, mut full_n) = (0.0, 0usize);
    let (mut occ_sum, mut occ_n) = (0.0, 0usize);
    let mut mass = vec![0.0; experts];
    let mut hist = vec![[0usize; ShapeFamily::COUNT]; experts];
    for o in outcomes {
        if let Some(v) = iou(&o.predicted, o.amodal)? {
            full_sum += v;
            full_n += 1;
        }
        let gt_occ = o.amodal.and_not(o.visible);
        if !gt_occ.is_empty_mask() {
            let pred_occ = o.predicted.and_not(o.visible);
            occ_sum += iou(&pred_occ, &gt_occ)?.expect("ground truth is nonempty");
            occ_n += 1;
        }
        if o.gate.len() != experts || o.primary >= experts {
            return Err(Error::dim("gate length does not match expert count"));
        }
        for (m, &g) in mass.iter_mut().zip(&o.gate) {
            *m += g;
        }
        hist[o.primary][o.family.index()] += 1;
    }
    let total: f64 = mass.iter().sum();
    let utilization: Vec<f64> = mass.iter().map(|m| m / total).collect();
    let majority: usize = hist.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(EvalReport {
        miou_full: if full_n > 0 { full_sum / full_n as f64 } else { 0.0 },
        miou_occ: (occ_n > 0).then(|| occ_sum / occ_n as f64),
        n_samples: n,
        n_occluded_samples: occ_n,
        utilization_entropy_normalized: normalized_entropy(&utilization),
        utilization,
        purity: majority as f64 / n as f64,
        family_histogram: hist,
    })
}

/// How the latent code is chosen at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RoutingMode {
    /// `l_o = μ`.
    #[default]
    Mean,
    /// `η` drawn from a per-sample RNG derived from `seed`.
    Stochastic { seed: u64 },
}

/// Predictions for every record, in dataset order.
pub fn predict_all(
    model: &Model,
    data: &Dataset,
    mode: RoutingMode,
    counter: Option<&ExpertCounter>,
) -> Result<Vec<Prediction>> {
    let side = model.config.side;
    if data.height != side || data.width != side {
        return Err(Error::ConfigMismatch(format!(
            "dataset is {}×{}, model expects {side}×{side}",
            data.height, data.width
        )));
    }
    data.records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let eta = match mode {
                RoutingMode::Mean => None,
                RoutingMode::Stochastic { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i as u64));
                    Some(draw_eta::<f32, _>(model.config.latent_dim, &mut rng))
                }
            };
            model.predict(r, eta.as_deref(), counter)
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset, mode: RoutingMode) -> Result<EvalReport> {
    let preds = predict_all(model, data, mode, None)?;
    let outcomes: Vec<SampleOutcome<'_>> = data
        .records
        .iter()
        .zip(&preds)
        .map(|(r, p)| SampleOutcome {
            family: r.family,
            predicted: p.mask.binary(),
            visible: &r.visible,
            amodal: &r.amodal,
            gate: p.decision.gate.iter().map(|&g| g as f64).collect(),
            primary: p.decision.primary(),
        })
        .collect();
    summarize(&outcomes, model.config.experts)
}

pub const ROUTING_HEADER: [&str; 6] = ["sample_id", "family", "selected", "gate", "mu", "sigma"];

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

/// One CSV row per sample; vector fields are `;`-separated.
pub fn routing_table(model: &Model, data: &Dataset, mode: RoutingMode) -> Result<String> {
    let preds = predict_all(model, data, mode, None)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::config(format!("csv: {e}"));
    w.write_record(ROUTING_HEADER).map_err(csv_err)?;
    for (r, p) in data.records.iter().zip(&preds) {
        w.write_record([
            r.sample_id.to_string(),
            r.family.name().to_string(),
            join(&p.decision.selected),
            join(&p.decision.gate),
            join(&p.distribution.mu),
            join(&p.distribution.effective_std()),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(iou(&a, &a).unwrap(), Some(1.0));
        let b = Mask::from_fn(4, 4, |y, x| y >= 2 && x >= 2);
        assert_eq!(iou(&a, &b).unwrap(), Some(0.0));
        let shifted = Mask::from_fn(4, 4, |y, x| y < 2 && (1..3).contains(&x));
        let v = iou(&a, &shifted).unwrap().unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        let e = Mask::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), None);
        assert!(iou(&a, &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn entropy_endpoints() {
        assert_eq!(normalized_entropy(&[1.0, 0.0, 0.0, 0.0]), 0.0);
        assert!(normalized_entropy(&[1.0, 0.0, 0.0, 0.0]).is_sign_positive());
        assert!((normalized_entropy(&[0.25; 4]) - 1.0).abs() < 1e-12);
    }
}
