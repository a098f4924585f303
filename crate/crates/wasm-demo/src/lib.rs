//! Browser bindings: augment a synthetic record, count policy spaces and
//! sample relaxed gates.

use augsearch::augment::{augment_batch, AugOpSpec, Montage, OpKind};
use augsearch::autodiff::{Tape, Tensor};
use augsearch::data::{generate_synthetic, SyntheticSpec};
use augsearch::estimators::relaxed_bernoulli;
use augsearch::policy::policy_space_size;
use augsearch::rng::RandomStream;
use wasm_bindgen::prelude::*;

fn js_err(e: augsearch::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Names of the operations the demo can apply.
#[wasm_bindgen]
pub fn op_names() -> Vec<String> {
    OpKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

/// One synthetic record of class `label` and its augmented copy.
///
/// Layout: channel-major original (`C x T`) followed by the augmented record.
pub fn augment_record_impl(op: &str, p: f64, mu: f64, label: usize, n_times: usize, seed: u64) -> augsearch::Result<Vec<f64>> {
    let kind: OpKind = op.parse()?;
    let spec = SyntheticSpec {
        n_times,
        ..SyntheticSpec::default()
    };
    let rng = RandomStream::new(seed, 0);
    let data = generate_synthetic(&spec, 2 * spec.classes.len(), &rng.derive_named("record"))?;
    let index = data
        .batch
        .labels
        .iter()
        .position(|&y| y == label)
        .ok_or_else(|| augsearch::Error::contract(format!("no class {label}")))?;
    let record = data.batch.select(&[index]);
    let montage = Montage::builtin().select(&data.channel_names)?;
    let spec = AugOpSpec::new(kind, p, mu)?;
    let out = augment_batch(&record, &spec, Some(&montage), &mut rng.derive_named("augment"))?;
    let mut both = record.data.data().to_vec();
    both.extend_from_slice(out.data.data());
    Ok(both)
}

#[wasm_bindgen]
pub fn augment_record(op: &str, p: f64, mu: f64, label: usize, n_times: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    augment_record_impl(op, p, mu, label, n_times, seed).map_err(js_err)
}

/// Number of channels in a demo record.
#[wasm_bindgen]
pub fn record_channels() -> usize {
    SyntheticSpec::default().channel_names.len()
}

/// Exact count of discrete policies, in decimal.
#[wasm_bindgen]
pub fn space_size(n_probabilities: u32, n_magnitudes: u32, n_ops: u32, n_subpolicies: u32, n_stages: u32, n_classes: u32) -> Result<String, JsError> {
    policy_space_size(
        n_probabilities.into(),
        n_magnitudes.into(),
        n_ops.into(),
        n_subpolicies,
        n_stages,
        n_classes,
    )
    .map(|n| n.to_string())
    .map_err(js_err)
}

/// `n` relaxed Bernoulli gates at probability `p`.
pub fn relaxed_gates_impl(p: f64, temperature: f64, n: usize, seed: u64) -> augsearch::Result<Vec<f64>> {
    let tape = Tape::new();
    let probs = tape.constant(Tensor::vector(&vec![p; n]));
    let u = RandomStream::new(seed, 0).uniforms(n);
    Ok(relaxed_bernoulli(probs, &u, temperature)?.tensor().data().to_vec())
}

#[wasm_bindgen]
pub fn relaxed_gates(p: f64, temperature: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    relaxed_gates_impl(p, temperature, n, seed).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_flip_negates_the_record() {
        let both = augment_record_impl("sign_flip", 1.0, 0.5, 1, 512, 3).unwrap();
        let (a, b) = both.split_at(both.len() / 2);
        assert_eq!(a.len(), record_channels() * 512);
        assert!(a.iter().zip(b).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn zero_probability_leaves_the_record() {
        let both = augment_record_impl("ft_surrogate", 0.0, 0.9, 0, 512, 4).unwrap();
        let (a, b) = both.split_at(both.len() / 2);
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(augment_record_impl("mixup", 0.5, 0.5, 0, 512, 0).is_err());
        assert!(augment_record_impl("sign_flip", 0.5, 0.5, 7, 512, 0).is_err());
        assert!(relaxed_gates_impl(0.5, 0.0, 4, 0).is_err());
    }

    #[test]
    fn space_sizes() {
        assert_eq!(policy_space_size(4, 1, 4, 5, 1, 1).unwrap().to_string(), "1048576");
        assert_eq!(op_names().len(), 13);
    }

    #[test]
    fn cold_gates_follow_the_probability() {
        let g = relaxed_gates_impl(0.3, 0.01, 10_000, 5).unwrap();
        let on = g.iter().filter(|&&v| v > 0.5).count() as f64 / g.len() as f64;
        assert!((on - 0.3).abs() < 3.0 * (0.3 * 0.7 / 1e4_f64).sqrt());
        assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
