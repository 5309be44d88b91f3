use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use deltamem::backbone::{Backbone, BackboneConfig};
use deltamem::checkpoint::save_model;
use deltamem::eval::generate;
use deltamem::model::{DeltaMem, MemoryConfig};
use deltamem::numerics::Tensor;
use deltamem::osam::delta_write;
use deltamem::params::Parameters;
use deltamem_ffi::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> DeltaMem<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        vocab_size: 64,
        max_seq_len: 32,
    };
    let b = Backbone::init(cfg, &mut rng).unwrap();
    let mem = MemoryConfig {
        rank: 4,
        backbone_len: 32,
        ..MemoryConfig::default()
    };
    let mut m = DeltaMem::new(b, mem, &mut rng).unwrap();
    // Nonzero steering so the state matters.
    m.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3)));
    m
}

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dm_last_error_message()) }.to_str().unwrap().to_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    model: DeltaMem<f32>,
    handle: *mut DmModel,
    path: std::path::PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let model = model();
        let path = dir.path().join("m.dmem");
        save_model(&model, &path).unwrap();
        let mut handle = ptr::null_mut();
        assert_eq!(unsafe { dm_model_load(c(&path).as_ptr(), &mut handle) }, DmStatus::Ok);
        assert!(!handle.is_null());
        Fixture {
            _dir: dir,
            model,
            handle,
            path,
        }
    }

    fn state(&self) -> *mut DmState {
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { dm_state_new(self.handle, &mut s) }, DmStatus::Ok);
        s
    }

    fn query(&self, s: *const DmState, prompt: &[u32]) -> Vec<f32> {
        let mut logits = vec![0f32; 64];
        let st = unsafe { dm_query(self.handle, s, prompt.as_ptr(), prompt.len(), logits.as_mut_ptr(), logits.len()) };
        assert_eq!(st, DmStatus::Ok, "{}", last_error());
        logits
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe { dm_model_free(self.handle) };
    }
}

const CONTEXT: [u32; 6] = [8, 40, 9, 41, 10, 42];
const SEGMENTS: [u32; 6] = [0, 0, 1, 1, 2, 2];
const PROMPT: [u32; 2] = [1, 9];

#[test]
fn ingest_then_query_matches_library() {
    let f = Fixture::new();
    let s = f.state();
    let st = unsafe { dm_ingest(f.handle, s, CONTEXT.as_ptr(), SEGMENTS.as_ptr(), CONTEXT.len()) };
    assert_eq!(st, DmStatus::Ok);
    let got = f.query(s, &PROMPT);

    let mut state = f.model.zero_state();
    f.model.ingest(&CONTEXT, Some(&SEGMENTS), &mut state).unwrap();
    let want = f.model.logits(&PROMPT, &state).unwrap();
    assert_eq!(got.as_slice(), &want.data()[64..128]);

    let fresh = f.state();
    assert_ne!(f.query(fresh, &PROMPT), got);
    unsafe {
        dm_state_free(s);
        dm_state_free(fresh);
    }
}

#[test]
fn state_round_trips_through_files() {
    let f = Fixture::new();
    let s = f.state();
    unsafe { dm_ingest(f.handle, s, CONTEXT.as_ptr(), ptr::null(), CONTEXT.len()) };
    let path = f.path.with_file_name("s.dmem");
    assert_eq!(unsafe { dm_state_save(s, c(&path).as_ptr()) }, DmStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { dm_state_load(c(&path).as_ptr(), &mut loaded) }, DmStatus::Ok);
    let a = f.query(s, &PROMPT);
    let b = f.query(loaded, &PROMPT);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    unsafe {
        dm_state_free(s);
        dm_state_free(loaded);
    }
}

#[test]
fn generate_matches_library() {
    let f = Fixture::new();
    let s = f.state();
    unsafe { dm_ingest(f.handle, s, CONTEXT.as_ptr(), SEGMENTS.as_ptr(), CONTEXT.len()) };
    let alphabet: Vec<u32> = (40..56).collect();
    let mut out = [0u32; 3];
    let st = unsafe {
        dm_generate(f.handle, s, PROMPT.as_ptr(), 2, alphabet.as_ptr(), alphabet.len(), out.as_mut_ptr(), 3)
    };
    assert_eq!(st, DmStatus::Ok);
    let mut state = f.model.zero_state();
    f.model.ingest(&CONTEXT, Some(&SEGMENTS), &mut state).unwrap();
    assert_eq!(out.to_vec(), generate(&f.model, &PROMPT, &state, 3, &alphabet).unwrap());
    unsafe { dm_state_free(s) };
}

#[test]
fn errors_map_to_codes_with_messages() {
    let f = Fixture::new();
    let s = f.state();
    let bad = [99u32];
    assert_eq!(unsafe { dm_ingest(f.handle, s, bad.as_ptr(), ptr::null(), 1) }, DmStatus::OutOfVocab);
    assert!(last_error().contains("99"));
    assert_eq!(unsafe { dm_ingest(ptr::null(), s, bad.as_ptr(), ptr::null(), 1) }, DmStatus::NullPointer);
    assert_eq!(unsafe { dm_ingest(f.handle, s, ptr::null(), ptr::null(), 3) }, DmStatus::NullPointer);
    let mut small = [0f32; 8];
    let st = unsafe { dm_query(f.handle, s, PROMPT.as_ptr(), 2, small.as_mut_ptr(), small.len()) };
    assert_eq!(st, DmStatus::BufferTooSmall);
    let long = vec![2u32; 33];
    let mut logits = [0f32; 64];
    let st = unsafe { dm_query(f.handle, s, long.as_ptr(), long.len(), logits.as_mut_ptr(), 64) };
    assert_eq!(st, DmStatus::TooLong);
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/m.dmem").unwrap();
    assert_eq!(unsafe { dm_model_load(missing.as_ptr(), &mut m) }, DmStatus::Io);
    assert!(m.is_null());
    let junk = f.path.with_file_name("junk.dmem");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(unsafe { dm_model_load(c(&junk).as_ptr(), &mut m) }, DmStatus::Format);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { dm_state_new(f.handle, &mut ptr::null_mut()) }, DmStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        dm_state_free(s);
        dm_state_free(ptr::null_mut());
        dm_model_free(ptr::null_mut());
    }
}

#[test]
fn parameter_counts() {
    let f = Fixture::new();
    let mut n = 0usize;
    let qo = CString::new("qo").unwrap();
    assert_eq!(unsafe { dm_params_count(64, 1, 8, 1, qo.as_ptr(), &mut n) }, DmStatus::Ok);
    assert_eq!(n, 3080);
    assert_eq!(unsafe { dm_model_params_count(f.handle, &mut n) }, DmStatus::Ok);
    assert_eq!(n, deltamem::training::enumerate_trainable(&f.model));
    let bad = CString::new("qz").unwrap();
    assert_eq!(unsafe { dm_params_count(64, 1, 8, 1, bad.as_ptr(), &mut n) }, DmStatus::InvalidArgument);
    assert_eq!(unsafe { dm_model_vocab_size(f.handle) }, 64);
}

#[test]
fn raw_delta_write_and_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = 4;
    let s0: Vec<f32> = (0..r * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f32> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f32> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..r).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut s = s0.clone();
    assert_eq!(unsafe { dm_delta_write(s.as_mut_ptr(), k.as_ptr(), v.as_ptr(), b.as_ptr(), r) }, DmStatus::Ok);
    let want = delta_write(&Tensor::new(vec![r, r], s0).unwrap(), &k, &v, &b).unwrap();
    assert_eq!(s.as_slice(), want.data());
    assert_eq!(unsafe { dm_delta_write(s.as_mut_ptr(), k.as_ptr(), v.as_ptr(), b.as_ptr(), 0) }, DmStatus::InvalidArgument);

    let row = [0.5f32, 2.0, 2.0, 1.0];
    let mut out = 0;
    assert_eq!(unsafe { dm_constrained_argmax(row.as_ptr(), 4, [3u32, 2, 1].as_ptr(), 3, &mut out) }, DmStatus::Ok);
    assert_eq!(out, 2);
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/deltamem.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "dm_last_error_message",
        "dm_model_load",
        "dm_model_free",
        "dm_model_vocab_size",
        "dm_model_params_count",
        "dm_params_count",
        "dm_state_new",
        "dm_state_free",
        "dm_state_save",
        "dm_state_load",
        "dm_ingest",
        "dm_query",
        "dm_generate",
        "dm_constrained_argmax",
        "dm_delta_write",
        "typedef struct DmModel DmModel",
        "typedef struct DmState DmState",
        "DM_STATUS_OK = 0",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match std::process::Command::new(&cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    {
        Ok(st) => assert!(st.success(), "{cc} rejected the header"),
        Err(_) => eprintln!("no C compiler; skipped the syntax check"),
    }
}
