//! Compares a one-layer qkvo model against the numpy trace in
//! `tools/micro_trace.py`, built from the same closed-form weights.

use deltamem::backbone::{Backbone, BackboneConfig};
use deltamem::model::{DeltaMem, MemoryConfig};
use deltamem::numerics::Tensor;
use deltamem::params::Parameters;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn formula(t: &mut Tensor<f64>, tid: usize, gain: bool) {
    for (i, x) in t.data_mut().iter_mut().enumerate() {
        let s = (0.3 + 1.7 * tid as f64 + 0.61 * i as f64).sin();
        *x = if gain { 1.0 + 0.2 * s } else { 0.5 * s };
    }
}

fn micro_model() -> DeltaMem<f64> {
    let cfg = BackboneConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 2,
        head_dim: 2,
        vocab_size: 6,
        max_seq_len: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = Backbone::<f64>::init(cfg, &mut rng).unwrap();
    let mem = MemoryConfig {
        rank: 2,
        alpha: 3.0,
        branches: "qkvo".parse().unwrap(),
        backbone_len: 8,
        ..MemoryConfig::default()
    };
    let mut m = DeltaMem::new(b, mem, &mut rng).unwrap();
    let mut tid = 0;
    m.backbone.visit_mut(&mut |name, t| {
        formula(t, tid, name.ends_with("gain"));
        tid += 1;
    });
    assert_eq!(tid, 16);
    m.visit_mut(&mut |_, t| {
        formula(t, tid, false);
        tid += 1;
    });
    assert_eq!(tid, 25);
    m
}

fn fixture() -> serde_json::Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/micro_trace.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn tokens(v: &serde_json::Value) -> Vec<u32> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect()
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= 1e-10, "{what}[{i}]: {g} vs {w}");
    }
}

#[test]
fn ingest_and_prompt_match_numpy_trace() {
    let fx = fixture();
    let m = micro_model();
    let mut state = m.zero_state();
    m.ingest(&tokens(&fx["context"]), None, &mut state).unwrap();
    let s = state.layer(0).unwrap().sub_state(0).data().to_vec();
    assert_close(&s, &floats(&fx["state_after_context"]), "state after context");
    assert_eq!(state.layer(0).unwrap().step(), 3);

    let (logits, after) = m.predict(&tokens(&fx["prompt"]), &state).unwrap();
    assert_close(logits.data(), &floats(&fx["prompt_logits"]), "prompt logits");
    let s2 = after.layer(0).unwrap().sub_state(0).data().to_vec();
    assert_close(&s2, &floats(&fx["state_after_prompt"]), "state after prompt");
}

#[test]
fn float32_tracks_the_trace() {
    let fx = fixture();
    let m = micro_model().cast::<f32>();
    let mut state = m.zero_state();
    m.ingest(&tokens(&fx["context"]), None, &mut state).unwrap();
    let logits = m.logits(&tokens(&fx["prompt"]), &state).unwrap();
    for (g, w) in logits.data().iter().zip(floats(&fx["prompt_logits"])) {
        assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
    }
}
