use std::ffi::{CStr, CString};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tempfile::TempDir;
use vslm::data::{generate_corpus, write_corpus, CorpusConfig, CorpusHeader};
use vslm::decoder::Variant;
use vslm::pipeline::{Checkpoint, Model, ModelConfig, TrainConfig};
use vslm_ffi::*;

fn small_corpus() -> CorpusConfig {
    CorpusConfig { max_phonemes: 5, max_duration: 3, ref_frames: 4, ..CorpusConfig::default() }
}

/// Writes an untrained full-variant checkpoint and a matching corpus.
fn fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let mut cfg = ModelConfig::default();
    cfg.aligner.dim_h = 16;
    cfg.aligner.heads = 2;
    cfg.decoder.dim_m = 16;
    cfg.decoder.heads = 2;
    cfg.decoder.n_g = 1;
    cfg.decoder.n_l = 1;
    let model = Model::new(Variant::Full, &cfg, &small_corpus(), 1).unwrap();
    let ckpt = dir.join("m.ckpt");
    Checkpoint::from_model(&model, &TrainConfig::default(), 0).save(&ckpt).unwrap();
    let data = dir.join("d.jsonl");
    let utts = generate_corpus(5, 3, &small_corpus()).unwrap();
    write_corpus(BufWriter::new(File::create(&data).unwrap()), &CorpusHeader::new(small_corpus(), 5, 3), &utts).unwrap();
    (ckpt, data)
}

fn last_error() -> String {
    let p = vslm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn corpus_and_metric_round_trip() {
    unsafe {
        let mut corpus = ptr::null_mut();
        assert_eq!(vslm_corpus_generate(1, 3, &mut corpus), VslmStatus::Ok);
        assert!(vslm_last_error_message().is_null());
        assert_eq!(vslm_corpus_len(corpus), 3);
        let mut target = ptr::null_mut();
        assert_eq!(vslm_corpus_target(corpus, 2, &mut target), VslmStatus::Ok);
        let mut frames = 0;
        assert_eq!(vslm_corpus_video_frames(corpus, 2, &mut frames), VslmStatus::Ok);
        assert_eq!(vslm_grid_frames(target), frames);

        let mut acc = 0.0;
        assert_eq!(vslm_token_accuracy(target, target, &mut acc), VslmStatus::Ok);
        assert_eq!(acc, 1.0);
        let mut mcd = f64::NAN;
        assert_eq!(vslm_mcd_dtw(corpus, target, target, &mut mcd), VslmStatus::Ok);
        assert_eq!(mcd, 0.0);

        let n = vslm_grid_frames(target) * vslm_grid_n_q(target);
        let mut buf = vec![0u32; n];
        assert_eq!(vslm_grid_copy_tokens(target, buf.as_mut_ptr(), n), VslmStatus::Ok);
        let mut tok = 0;
        assert_eq!(vslm_codec_encode(corpus, 0, 0, 1, &mut tok), VslmStatus::Ok);
        assert_eq!(vslm_codec_encode(corpus, 0, 0, 9, &mut tok), VslmStatus::InvalidArgument);

        vslm_grid_free(target);
        vslm_corpus_free(corpus);
    }
}

#[test]
fn failures_set_codes_and_messages() {
    unsafe {
        let mut out = 0.0;
        assert_eq!(vslm_token_accuracy(ptr::null(), ptr::null(), &mut out), VslmStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(vslm_duration_error(3, 0, &mut out), VslmStatus::InvalidArgument);
        assert_eq!(vslm_duration_error(3, 2, &mut out), VslmStatus::Ok);
        assert_eq!(out, 0.5);
        assert!(vslm_last_error_message().is_null());

        let mut corpus = ptr::null_mut();
        assert_eq!(vslm_corpus_generate(1, 0, &mut corpus), VslmStatus::InvalidArgument);
        assert!(corpus.is_null());
        let mut frames = 0;
        assert_eq!(vslm_corpus_generate(1, 1, &mut corpus), VslmStatus::Ok);
        assert_eq!(vslm_corpus_video_frames(corpus, 5, &mut frames), VslmStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        vslm_corpus_free(corpus);

        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(vslm_model_load(missing.as_ptr(), &mut model), VslmStatus::Io);
        assert_eq!(vslm_model_n_q(ptr::null()), 0);
        vslm_model_free(ptr::null_mut());
    }
}

#[test]
fn generation_through_handles() {
    let dir = TempDir::new().unwrap();
    let (ckpt, data) = fixtures(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(vslm_model_load(cstr(&ckpt).as_ptr(), &mut model), VslmStatus::Ok);
        assert!(vslm_model_uses_aligner(model));
        let mut corpus = ptr::null_mut();
        assert_eq!(vslm_corpus_load(cstr(&data).as_ptr(), &mut corpus), VslmStatus::Ok);
        let tokens = |k: usize, seed: u64| {
            let mut g = ptr::null_mut();
            assert_eq!(vslm_generate(model, corpus, 0, k, 1.0, seed, &mut g), VslmStatus::Ok);
            let n = vslm_grid_frames(g) * vslm_grid_n_q(g);
            let mut buf = vec![0u32; n];
            assert_eq!(vslm_grid_copy_tokens(g, buf.as_mut_ptr(), n), VslmStatus::Ok);
            vslm_grid_free(g);
            buf
        };
        let mut frames = 0;
        vslm_corpus_video_frames(corpus, 0, &mut frames);
        assert_eq!(tokens(30, 4).len(), frames * vslm_model_n_q(model));
        assert_eq!(tokens(30, 4), tokens(30, 4));
        assert_eq!(tokens(1, 4), tokens(1, 5));

        let mut other = ptr::null_mut();
        assert_eq!(vslm_corpus_generate(1, 1, &mut other), VslmStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(vslm_generate(model, other, 0, 30, 1.0, 0, &mut g), VslmStatus::Incompatible);
        assert_eq!(vslm_generate(model, corpus, 0, 0, 1.0, 0, &mut g), VslmStatus::InvalidArgument);
        vslm_corpus_free(other);
        vslm_corpus_free(corpus);
        vslm_model_free(model);
    }
}

#[test]
fn checkpoint_version_mismatch_is_incompatible() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = fixtures(dir.path());
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(vslm_model_load(cstr(&ckpt).as_ptr(), &mut model), VslmStatus::Incompatible);
        assert!(last_error().contains("version"));
    }
}

#[test]
fn header_declares_every_export() {
    let header = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vslm.h")).unwrap();
    let src = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct VslmModel VslmModel;"));
}

/// Directory holding the library artifacts next to this test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = artifact_dir().join("libvslm_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = TempDir::new().unwrap();
    let (ckpt, data) = fixtures(dir.path());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).arg(&ckpt).arg(&data).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
