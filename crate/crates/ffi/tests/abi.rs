use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use featgen_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fg_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn synthetic(seed: u64) -> *mut FgDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { fg_dataset_synthetic(3, 2, 6, 4, 8, 0.1, seed, &mut ds) };
    assert_eq!(st, FgStatus::Ok, "{}", last_error());
    ds
}

fn tiny_config(variant: FgVariant) -> FgTrainConfig {
    let mut cfg = unsafe { std::mem::zeroed() };
    assert_eq!(unsafe { fg_train_config_default(variant, &mut cfg) }, FgStatus::Ok);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.hidden_g = 16;
    cfg.hidden_d = 16;
    cfg.critic_steps = 2;
    cfg.cls_epochs = 3;
    cfg
}

#[test]
fn dataset_dims_and_round_trip() {
    let ds = synthetic(1);
    let (mut dx, mut dc, mut ns, mut nu) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { fg_dataset_dims(ds, &mut dx, &mut dc, &mut ns, &mut nu) },
        FgStatus::Ok
    );
    assert_eq!((dx, dc, ns, nu), (6, 4, 3, 2));
    // null outputs are skipped
    assert_eq!(
        unsafe { fg_dataset_dims(ds, ptr::null_mut(), &mut dc, ptr::null_mut(), ptr::null_mut()) },
        FgStatus::Ok
    );

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.fgzl").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fg_dataset_save(ds, path.as_ptr()) }, FgStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { fg_dataset_load(path.as_ptr(), &mut back) }, FgStatus::Ok);
    assert!(!back.is_null());
    unsafe {
        fg_dataset_free(back);
        fg_dataset_free(ds);
        fg_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { fg_dataset_load(ptr::null(), &mut ds) },
        FgStatus::NullArgument
    );
    assert!(!last_error().is_empty());

    let missing = CString::new("/nonexistent/x.fgzl").unwrap();
    assert_eq!(unsafe { fg_dataset_load(missing.as_ptr(), &mut ds) }, FgStatus::Io);
    assert!(ds.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"FGZLxx").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fg_dataset_load(junk.as_ptr(), &mut ds) }, FgStatus::Format);

    assert_eq!(
        unsafe { fg_dataset_synthetic(0, 0, 6, 4, 8, 0.1, 0, &mut ds) },
        FgStatus::InvalidArgument
    );

    // success clears the message
    assert_eq!(fg_harmonic_mean(1.0, 1.0), 1.0);
    let ok = synthetic(0);
    assert!(last_error().is_empty());
    unsafe { fg_dataset_free(ok) };
}

#[test]
fn metrics() {
    assert!((fg_harmonic_mean(43.7, 57.7) - 49.7).abs() < 0.05);
    assert_eq!(fg_harmonic_mean(0.0, 0.0), 0.0);
    let pred = [0u32, 0, 1, 2];
    let truth = [0u32, 1, 1, 1];
    let mut top1 = 0.0;
    assert_eq!(
        unsafe { fg_per_class_top1(pred.as_ptr(), truth.as_ptr(), 4, &mut top1) },
        FgStatus::Ok
    );
    assert!((top1 - (100.0 + 100.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(
        unsafe { fg_per_class_top1(ptr::null(), truth.as_ptr(), 4, &mut top1) },
        FgStatus::NullArgument
    );
    assert_eq!(
        unsafe { fg_per_class_top1(pred.as_ptr(), truth.as_ptr(), 0, &mut top1) },
        FgStatus::Eval
    );
}

#[test]
fn train_synthesize_evaluate() {
    let ds = synthetic(2);
    let cfg = tiny_config(FgVariant::ClsWgan);
    let mut gen = ptr::null_mut();
    assert_eq!(unsafe { fg_train(ds, &cfg, &mut gen) }, FgStatus::Ok, "{}", last_error());

    let n_syn = 4u32;
    let mut feats = vec![0f32; 2 * 4 * 6];
    let mut labels = vec![0u32; 2 * 4];
    let st = unsafe {
        fg_synthesize_unseen(gen, ds, n_syn, 7, feats.as_mut_ptr(), feats.len(), labels.as_mut_ptr(), labels.len())
    };
    assert_eq!(st, FgStatus::Ok, "{}", last_error());
    assert_eq!(labels, [3, 3, 3, 3, 4, 4, 4, 4]);
    assert!(feats.iter().all(|v| *v >= 0.0));

    let st = unsafe {
        fg_synthesize_unseen(gen, ds, n_syn, 7, feats.as_mut_ptr(), feats.len() - 1, labels.as_mut_ptr(), labels.len())
    };
    assert_eq!(st, FgStatus::InvalidArgument);

    let mut scores = FgScores {
        zsl_t1: -1.0,
        gzsl_u: -1.0,
        gzsl_s: -1.0,
        gzsl_h: -1.0,
    };
    assert_eq!(
        unsafe { fg_evaluate_synthesis(gen, ds, 5, 1, ptr::null(), &mut scores) },
        FgStatus::Ok,
        "{}",
        last_error()
    );
    for v in [scores.zsl_t1, scores.gzsl_u, scores.gzsl_s, scores.gzsl_h] {
        assert!((0.0..=100.0).contains(&v));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("g.fgnw").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fg_generator_save(gen, path.as_ptr()) }, FgStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { fg_generator_load(path.as_ptr(), 0.2, &mut back) }, FgStatus::Ok);
    let mut again = vec![0f32; feats.len()];
    unsafe {
        fg_synthesize_unseen(back, ds, n_syn, 7, again.as_mut_ptr(), again.len(), labels.as_mut_ptr(), labels.len());
    }
    assert_eq!(again, feats);
    unsafe {
        fg_generator_free(back);
        fg_generator_free(gen);
        fg_dataset_free(ds);
    }
}

#[test]
fn bad_training_config_is_rejected() {
    let ds = synthetic(3);
    let mut cfg = tiny_config(FgVariant::Wgan);
    cfg.batch_size = 1;
    let mut gen = ptr::null_mut();
    assert_eq!(unsafe { fg_train(ds, &cfg, &mut gen) }, FgStatus::InvalidArgument);
    assert!(gen.is_null());
    assert_eq!(unsafe { fg_train(ds, ptr::null(), &mut gen) }, FgStatus::NullArgument);
    unsafe { fg_dataset_free(ds) };
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"featgen.h\"\nint main(void) { FgScores s; (void)s; return fg_harmonic_mean(1.0, 1.0) == 1.0 ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(status.success());
}
