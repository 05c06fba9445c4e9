use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pcrl_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = pcrl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn losses_through_the_abi() {
    let rows = [1.0, 0.0, 1.0, 0.0];
    let mut v = f64::NAN;
    let st = unsafe {
        pcrl_info_nce(
            rows.as_ptr(),
            rows.as_ptr(),
            2,
            2,
            1.0,
            0.5,
            0.5,
            PcrlDenominator::Standard,
            &mut v,
        )
    };
    assert_eq!(st, PcrlStatus::Ok);
    assert!((v - 2f64.ln()).abs() < 1e-9);
    let st = unsafe {
        pcrl_info_nce(
            rows.as_ptr(),
            rows.as_ptr(),
            2,
            2,
            1.0,
            0.5,
            0.5,
            PcrlDenominator::Paper,
            &mut v,
        )
    };
    assert_eq!(st, PcrlStatus::Ok);
    assert!(v.abs() < 1e-9);

    let st = unsafe {
        pcrl_info_nce(
            rows.as_ptr(),
            rows.as_ptr(),
            1,
            4,
            1.0,
            0.5,
            0.5,
            PcrlDenominator::Standard,
            &mut v,
        )
    };
    assert_eq!(st, PcrlStatus::Data);
    assert!(last_error().contains('1'));

    let pred = [0.5, 0.5];
    let target = [1u8, 1];
    let st = unsafe { pcrl_dice_loss(pred.as_ptr(), target.as_ptr(), 1, 1, 2, 1e-300, &mut v) };
    assert_eq!(st, PcrlStatus::Ok);
    assert!((v - 0.2).abs() < 1e-9);
    assert!(pcrl_last_error().is_null());
}

#[test]
fn null_arguments_are_rejected() {
    let mut v = 0.0;
    let st = unsafe {
        pcrl_info_nce(
            ptr::null(),
            ptr::null(),
            2,
            2,
            1.0,
            0.5,
            0.5,
            PcrlDenominator::Standard,
            &mut v,
        )
    };
    assert_eq!(st, PcrlStatus::NullArgument);
    assert!(last_error().contains("null"));
    assert_eq!(
        unsafe { pcrl_dataset_open(ptr::null(), ptr::null_mut()) },
        PcrlStatus::NullArgument
    );
    assert_eq!(
        unsafe { pcrl_metrics_score(ptr::null(), ptr::null(), 0, ptr::null_mut()) },
        PcrlStatus::NullArgument
    );
    unsafe {
        pcrl_model_free(ptr::null_mut());
        pcrl_dataset_free(ptr::null_mut());
        pcrl_string_free(ptr::null_mut());
    }
}

#[test]
fn metrics_identity_corpus() {
    let reports = [
        CString::new("ventricle is normal .").unwrap(),
        CString::new("a b c d e .").unwrap(),
    ];
    let ptrs: Vec<_> = reports.iter().map(|c| c.as_ptr()).collect();
    let mut m = PcrlMetrics::default();
    assert_eq!(
        unsafe { pcrl_metrics_score(ptrs.as_ptr(), ptrs.as_ptr(), 2, &mut m) },
        PcrlStatus::Ok
    );
    assert!((m.b4 - 1.0).abs() < 1e-9 && (m.rouge_l - 1.0).abs() < 1e-9);
    assert!((m.cider_d - 10.0).abs() < 1e-9);
    assert_eq!(
        unsafe { pcrl_metrics_score(ptrs.as_ptr(), ptrs.as_ptr(), 0, &mut m) },
        PcrlStatus::Data
    );
}

#[test]
fn dataset_gallery_train_generate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        unsafe { pcrl_dataset_generate(20, 3, cstr(&data).as_ptr()) },
        PcrlStatus::Ok
    );
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { pcrl_dataset_open(cstr(&data).as_ptr(), &mut ds) },
        PcrlStatus::Ok
    );
    let mut n = 0;
    assert_eq!(
        unsafe { pcrl_dataset_split_len(ds, 0, &mut n) },
        PcrlStatus::Ok
    );
    assert_eq!(n, 14);
    assert_eq!(
        unsafe { pcrl_dataset_split_len(ds, 7, &mut n) },
        PcrlStatus::InvalidArgument
    );

    let galleries = dir.path().join("g");
    let mut total = 0;
    assert_eq!(
        unsafe { pcrl_gallery_build(ds, cstr(&galleries).as_ptr(), &mut total) },
        PcrlStatus::Ok
    );
    assert!(total > 0);
    assert_eq!(std::fs::read_dir(&galleries).unwrap().count(), 20);

    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "data_dir = data\ngallery_dir = g\ncheckpoint_dir = ck\nepochs = 1\nmax_steps_per_epoch = 1\neval_every = 0\n",
    )
    .unwrap();
    assert_eq!(unsafe { pcrl_train(cstr(&cfg).as_ptr()) }, PcrlStatus::Ok);
    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(
        unsafe { pcrl_train(cstr(&cfg).as_ptr()) },
        PcrlStatus::InvalidArgument
    );

    let mut model = ptr::null_mut();
    let ck = dir.path().join("ck").join("best.pcrl");
    assert_eq!(
        unsafe { pcrl_model_load(cstr(&ck).as_ptr(), &mut model) },
        PcrlStatus::Ok
    );
    let mut count = 0;
    assert_eq!(
        unsafe { pcrl_model_parameter_count(model, &mut count) },
        PcrlStatus::Ok
    );
    assert!(count > 0);

    let id = CString::new("s0000").unwrap();
    let gen = |seed| {
        let mut out = ptr::null_mut();
        let st =
            unsafe { pcrl_model_generate(model, ds, id.as_ptr(), 0.6, 0.9, 8, 0, seed, &mut out) };
        assert_eq!(st, PcrlStatus::Ok, "{}", last_error());
        let s = unsafe { CStr::from_ptr(out) }
            .to_string_lossy()
            .into_owned();
        unsafe { pcrl_string_free(out) };
        s
    };
    assert_eq!(gen(4), gen(4));
    let mut out = ptr::null_mut();
    let st = unsafe { pcrl_model_generate(model, ds, id.as_ptr(), 0.6, 0.0, 8, 0, 0, &mut out) };
    assert_eq!(st, PcrlStatus::InvalidArgument);

    let bad = dir.path().join("missing.pcrl");
    let mut m2 = ptr::null_mut();
    assert_eq!(
        unsafe { pcrl_model_load(cstr(&bad).as_ptr(), &mut m2) },
        PcrlStatus::Data
    );
    assert!(m2.is_null());
    unsafe {
        pcrl_model_free(model);
        pcrl_dataset_free(ds);
    }
}

fn target_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .parent()
        .unwrap()
        .to_path_buf()
}

#[test]
fn header_declares_the_abi_and_compiles_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/pcrl.h")).unwrap();
    for sym in [
        "pcrl_last_error",
        "pcrl_string_free",
        "pcrl_dataset_generate",
        "pcrl_dataset_open",
        "pcrl_gallery_build",
        "pcrl_train",
        "pcrl_model_load",
        "pcrl_model_generate",
        "pcrl_metrics_score",
        "pcrl_info_nce",
        "pcrl_dice_loss",
        "typedef struct PcrlModel PcrlModel",
        "PCRL_STATUS_NUMERIC",
    ] {
        assert!(header.contains(sym), "{sym}");
    }

    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping link check");
        return;
    };
    assert!(cc.status.success());
    let profile = if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    };
    let lib = target_dir().join(profile).join("libpcrl_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link check", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe)
        .arg(dir.path().join("data"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).ends_with(" 8\n"));
}
