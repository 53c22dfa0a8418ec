use std::ffi::{CStr, CString};
use std::process::Command;

use jf_core::decoding::{ar_greedy_decode, early_exit_decode, jacobi_decode, JacobiOptions};
use jf_core::model::{save_checkpoint, ModelConfig, ModelWeights};
use jf_core::TokenSequence;
use jf_ffi::*;

fn tiny_model(dir: &std::path::Path) -> (ModelWeights, CString) {
    let cfg = ModelConfig {
        model_dim: 32,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 48,
        ..ModelConfig::default()
    };
    let w = ModelWeights::init(&cfg).unwrap();
    let path = dir.join("m.jfck");
    save_checkpoint(&w, &path).unwrap();
    (w, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    let p = jf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn decodes_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let (w, path) = tiny_model(dir.path());
    let mut h = std::ptr::null_mut();
    assert_eq!(unsafe { jf_model_load(path.as_ptr(), &mut h) }, JfStatus::Ok);
    assert!(jf_last_error_message().is_null());
    assert_eq!(unsafe { jf_model_block_len(h) }, 21);
    assert_eq!(unsafe { jf_model_vocab_size(h) }, 262);

    let prompt: Vec<u32> = vec![257, 261, 3, 260, 10, 20, 30, 40, 50, 60, 70, 80, 259];
    let seq = TokenSequence::new(prompt.clone());
    let n = 14;
    let mut out = vec![0u32; n];
    let mut stats = JfDecodeStats::default();

    let call = |m: JfMethod, e: usize, out: &mut [u32], st: &mut JfDecodeStats| unsafe {
        jf_decode(h, m, prompt.as_ptr(), prompt.len(), n, e, 9, out.as_mut_ptr(), out.len(), st)
    };
    assert_eq!(call(JfMethod::Ar, 0, &mut out, &mut stats), JfStatus::Ok);
    let (ar, _) = ar_greedy_decode(&w, &seq, n).unwrap();
    assert_eq!(out, ar.0);
    assert_eq!(stats.iterations, n);

    assert_eq!(call(JfMethod::Jacobi, 0, &mut out, &mut stats), JfStatus::Ok);
    let (traj, rep) = jacobi_decode(&w, &seq, n, &JacobiOptions::new(9)).unwrap();
    assert_eq!(out, traj.fixed_point.0);
    assert_eq!(out, ar.0);
    assert_eq!(stats.iterations, rep.iterations);

    assert_eq!(call(JfMethod::EarlyExit, 1, &mut out, &mut stats), JfStatus::Ok);
    let (ee, rep) = early_exit_decode(&w, &seq, n, 1, 9).unwrap();
    assert_eq!(out, ee.0);
    assert_eq!(stats.forced_exit != 0, rep.forced_exit);
    assert_eq!(stats.iterations, 1);

    assert_eq!(call(JfMethod::EarlyExit, 0, &mut out, &mut stats), JfStatus::Contract);
    assert!(last_error().contains("exit point"));

    let mut small = vec![0u32; 3];
    assert_eq!(call(JfMethod::Ar, 0, &mut small, &mut stats), JfStatus::BufferTooSmall);

    let mut vals = vec![0f64; 7];
    let toks = [0u32, 255, 128, 0, 255, 128, 0];
    assert_eq!(unsafe { jf_detokenize(h, toks.as_ptr(), 7, vals.as_mut_ptr(), 7) }, JfStatus::Ok);
    assert!(vals[0] < vals[1]);
    assert_eq!(unsafe { jf_detokenize(h, toks.as_ptr(), 6, vals.as_mut_ptr(), 7) }, JfStatus::Contract);
    let bad = [300u32; 7];
    assert_eq!(unsafe { jf_detokenize(h, bad.as_ptr(), 7, vals.as_mut_ptr(), 7) }, JfStatus::Index);

    unsafe { jf_model_free(h) };
}

#[test]
fn capacity_and_token_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = tiny_model(dir.path());
    let mut h = std::ptr::null_mut();
    assert_eq!(unsafe { jf_model_load(path.as_ptr(), &mut h) }, JfStatus::Ok);
    let prompt = [257u32; 40];
    let mut out = vec![0u32; 21];
    let st = unsafe {
        jf_decode(h, JfMethod::Jacobi, prompt.as_ptr(), 40, 21, 0, 0, out.as_mut_ptr(), 21, std::ptr::null_mut())
    };
    assert_eq!(st, JfStatus::Capacity);
    let bad = [999u32; 4];
    let st = unsafe { jf_decode(h, JfMethod::Ar, bad.as_ptr(), 4, 2, 0, 0, out.as_mut_ptr(), 21, std::ptr::null_mut()) };
    assert_eq!(st, JfStatus::Index);
    unsafe { jf_model_free(h) };
}

#[test]
fn load_failures() {
    let mut h = std::ptr::null_mut();
    let missing = CString::new("/nonexistent/m.jfck").unwrap();
    assert_eq!(unsafe { jf_model_load(missing.as_ptr(), &mut h) }, JfStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { jf_model_load(junk.as_ptr(), &mut h) }, JfStatus::Format);
    assert_eq!(unsafe { jf_model_load(std::ptr::null(), &mut h) }, JfStatus::NullPointer);
    unsafe { jf_model_free(std::ptr::null_mut()) };
    let v = unsafe { CStr::from_ptr(jf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/jf.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["jf_model_load", "jf_model_free", "jf_decode", "jf_detokenize", "jf_last_error_message", "JfModel"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler; skipping compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"jf.h\"\n\
         int use(const char *p) {\n\
           JfModel *m = 0;\n\
           uint32_t prompt[1] = {257}, out[21];\n\
           JfDecodeStats st;\n\
           if (jf_model_load(p, &m) != JF_STATUS_OK) return 1;\n\
           JfStatus s = jf_decode(m, JF_METHOD_JACOBI, prompt, 1, 21, 0, 0, out, 21, &st);\n\
           jf_model_free(m);\n\
           return s == JF_STATUS_OK ? 0 : 2;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-c", "-o"])
        .arg(dir.path().join("use.o"))
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
