//! Browser bindings for three interactive views:
//!
//! * decision regions of a small classifier trained on two moons, with the
//!   max-KL perturbation at a clicked point;
//! * how max-abs normalization and softmax react to rescaled logits;
//! * psi against the ball radius for the trained classifier.
//!
//! All heavy lifting is done by `advrobust`; this crate only converts to and
//! from flat arrays that JavaScript can hold.

use wasm_bindgen::prelude::*;

use advrobust::data::{two_moons, Dataset};
use advrobust::metric::{max_kl, normalize_prediction, per_sample_max_kl, psi_from_divergences, MetricConfig, DEFAULT_PROB_FLOOR};
use advrobust::nn::{softmax, Network};
use advrobust::train::{clean_accuracy, train, Architecture, Optimizer, Regime, TrainConfig};
use advrobust::Tensor;

fn js_err(e: advrobust::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// A two-moons classifier and the data it was trained on.
#[wasm_bindgen]
pub struct MoonsModel {
    net: Network,
    data: Dataset,
    accuracy: f64,
}

#[wasm_bindgen]
impl MoonsModel {
    /// Trains a 2-32-32-2 network. `regime` is `natural` or `minmax`;
    /// `epsilon` is the training budget for `minmax`.
    #[wasm_bindgen(constructor)]
    pub fn new(regime: &str, epsilon: f64, seed: u64) -> Result<MoonsModel, JsValue> {
        let data = two_moons(400, 0.06, &mut advrobust::rng(seed));
        let regime = match regime {
            "natural" => Regime::Natural,
            "minmax" => Regime::Minmax {
                epsilon,
                steps: 7,
                step_size: epsilon / 4.0,
                warmup_epochs: 10,
            },
            other => return Err(JsValue::from_str(&format!("unknown regime {other:?}"))),
        };
        let cfg = TrainConfig::natural(200, 32, 0.01, seed)
            .with_regime(regime)
            .with_optimizer(Optimizer::Adam);
        let arch = Architecture::mlp(2, &[32, 32], 2);
        let net = train(&cfg, &data, &arch).map_err(js_err)?;
        let accuracy = clean_accuracy(&net, &data).map_err(js_err)?;
        Ok(MoonsModel { net, data, accuracy })
    }

    #[wasm_bindgen(getter)]
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    /// Training points as `[x0, y0, label0, x1, y1, label1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        (0..self.data.len())
            .flat_map(|i| {
                let p = self.data.image(i);
                [p[0], p[1], self.data.label(i) as f64]
            })
            .collect()
    }

    /// Decision value `Z_1 - Z_0` on a `res x res` grid over the unit
    /// square, row-major with `y` growing downward.
    pub fn field(&self, res: usize) -> Result<Vec<f64>, JsValue> {
        let mut out = Vec::with_capacity(res * res);
        let scale = (res.max(2) - 1) as f64;
        for r in 0..res {
            let points: Vec<[f64; 2]> = (0..res).map(|c| [c as f64 / scale, 1.0 - r as f64 / scale]).collect();
            let views: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
            for z in self.net.logits_batch(&views).map_err(js_err)? {
                out.push(z[1] - z[0]);
            }
        }
        Ok(out)
    }

    /// Max-KL perturbation at `(x, y)` within radius `epsilon`:
    /// `[max_kl, dx, dy, predicted_class]`.
    pub fn probe(&self, x: f64, y: f64, epsilon: f64) -> Result<Vec<f64>, JsValue> {
        let t = Tensor::from_vec(vec![x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]).map_err(js_err)?;
        let r = max_kl(&self.net, &t, &MetricConfig::new(epsilon, 0)).map_err(js_err)?;
        let pred = self.net.predict(t.data()).map_err(js_err)?;
        Ok(vec![r.value, r.delta.data()[0], r.delta.data()[1], pred as f64])
    }

    /// psi over the training points at each radius in `radii`.
    pub fn psi_curve(&self, radii: Vec<f64>) -> Result<Vec<f64>, JsValue> {
        let batch = self.data.take(100);
        radii
            .iter()
            .map(|&eps| {
                let mut cfg = MetricConfig::new(eps, 1);
                cfg.ascent_steps = 30;
                let kl: Vec<f64> = per_sample_max_kl(&self.net, &batch, &cfg, true)
                    .map_err(js_err)?
                    .into_iter()
                    .map(|r| r.value)
                    .collect();
                Ok(psi_from_divergences(&kl).0)
            })
            .collect()
    }
}

/// Normalized prediction and softmax of `logits * scale`, concatenated:
/// the first half is the normalized prediction, the second the softmax.
#[wasm_bindgen]
pub fn compare_normalizations(logits: Vec<f64>, scale: f64) -> Result<Vec<f64>, JsValue> {
    let z = Tensor::from_vec(logits.iter().map(|v| v * scale).collect()).map_err(js_err)?;
    let normalized = normalize_prediction(&z, DEFAULT_PROB_FLOOR).map_err(js_err)?;
    let mut out = normalized.probs.clone();
    out.extend_from_slice(softmax(&z).data());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_ignores_scale_but_softmax_does_not() {
        let a = compare_normalizations(vec![2.0, -1.0, 1.0], 1.0).unwrap();
        let b = compare_normalizations(vec![2.0, -1.0, 1.0], 50.0).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
        assert!(b[3] > a[3] + 0.2);
    }

    #[test]
    fn trained_moons_model_answers_queries() {
        let m = MoonsModel::new("natural", 0.0, 3).unwrap();
        assert!(m.accuracy() > 0.9, "{}", m.accuracy());
        assert_eq!(m.points().len(), 1200);
        assert_eq!(m.field(8).unwrap().len(), 64);
        let p = m.probe(0.5, 0.5, 0.1).unwrap();
        assert!(p[0] >= 0.0 && p[1].abs() <= 0.1 + 1e-12 && p[2].abs() <= 0.1 + 1e-12);
        let curve = m.psi_curve(vec![0.02, 0.1]).unwrap();
        assert!(curve[0] >= curve[1], "{curve:?}");
    }
}
