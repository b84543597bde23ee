use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use bragg_core::braggnn::{predict, ArchSpec, ModelWeights};
use bragg_core::frame_io::write_frames;
use bragg_core::synth::{render_patch, render_scene, PeakParams, SceneConfig};
use bragg_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bragg_last_error()) }.to_str().unwrap().to_string()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(bragg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn fit_recovers_a_rendered_peak() {
    let p = PeakParams { bg: 8.0, amp: 900.0, eta: 0.4, mu_y: 5.3, mu_z: 4.8, sigma_y: 1.1, sigma_z: 0.9 };
    let values = render_patch(&p, 11);
    let mut out = [0.0; 7];
    let mut converged = 0;
    let s = unsafe { bragg_fit_patch(values.as_ptr(), 11, out.as_mut_ptr(), &mut converged) };
    assert_eq!(s, BraggStatus::Ok);
    assert_eq!(converged, 1);
    assert!((out[3] - 5.3).abs() < 1e-6 && (out[4] - 4.8).abs() < 1e-6, "{out:?}");
}

#[test]
fn flat_patch_fit_reports_numerical_error() {
    let values = vec![3.0; 49];
    let mut out = [0.0; 7];
    let s = unsafe { bragg_fit_patch(values.as_ptr(), 7, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, BraggStatus::Numerical);
    assert!(last_error().contains("flat"), "{}", last_error());
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let mut out = [0.0; 2];
    let s = unsafe { bragg_model_predict(ptr::null(), ptr::null(), 1, out.as_mut_ptr()) };
    assert_eq!(s, BraggStatus::NullPointer);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { bragg_model_patch_size(ptr::null()) }, 0);
    assert_eq!(unsafe { bragg_frames_count(ptr::null()) }, 0);
    unsafe {
        bragg_model_free(ptr::null_mut());
        bragg_frames_free(ptr::null_mut());
        bragg_peaks_free(ptr::null_mut());
    }
}

#[test]
fn model_round_trip_and_predict_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("m.bnnw"));
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { bragg_model_init(0, 7, &mut model) }, BraggStatus::Ok);
    assert_eq!(unsafe { bragg_model_patch_size(model) }, 11);
    assert_eq!(unsafe { bragg_model_save(model, path.as_ptr()) }, BraggStatus::Ok);
    unsafe { bragg_model_free(model) };

    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { bragg_model_load(path.as_ptr(), &mut loaded) }, BraggStatus::Ok);
    let patches: Vec<f64> = (0..3 * 121).map(|i| ((i * 37) % 101) as f64).collect();
    let mut centers = [0.0; 6];
    assert_eq!(unsafe { bragg_model_predict(loaded, patches.as_ptr(), 3, centers.as_mut_ptr()) }, BraggStatus::Ok);
    unsafe { bragg_model_free(loaded) };

    let w = ModelWeights::init(&ArchSpec { attention_enabled: false, ..ArchSpec::default() }, 7).unwrap();
    assert_eq!(predict(&w, &patches, 3).unwrap(), centers.to_vec());
}

#[test]
fn loading_garbage_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.bnnw");
    std::fs::write(&p, b"not weights at all").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bragg_model_load(cpath(&p).as_ptr(), &mut m) }, BraggStatus::Format);
    assert!(m.is_null());
    let missing = cpath(&dir.path().join("missing.bnnw"));
    assert_eq!(unsafe { bragg_model_load(missing.as_ptr(), &mut m) }, BraggStatus::Io);
}

#[test]
fn frames_and_localization_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let scene = render_scene(&SceneConfig { n_frames: 3, n_peaks: 8, width: 80, height: 64, seed: 2, ..Default::default() }).unwrap();
    let p = dir.path().join("f.bfrm");
    write_frames(&scene.stack, &p).unwrap();

    let mut frames = ptr::null_mut();
    assert_eq!(unsafe { bragg_frames_read(cpath(&p).as_ptr(), &mut frames) }, BraggStatus::Ok);
    assert_eq!(unsafe { bragg_frames_count(frames) }, 3);
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { bragg_frames_dims(frames, &mut w, &mut h) }, BraggStatus::Ok);
    assert_eq!((w, h), (80, 64));
    let mut buf = vec![0f32; w * h];
    assert_eq!(unsafe { bragg_frames_copy(frames, 1, buf.as_mut_ptr(), buf.len()) }, BraggStatus::Ok);
    assert_eq!(buf, scene.stack.frames[1].counts);
    assert_eq!(unsafe { bragg_frames_copy(frames, 3, buf.as_mut_ptr(), buf.len()) }, BraggStatus::InvalidArgument);
    assert_eq!(unsafe { bragg_frames_copy(frames, 0, buf.as_mut_ptr(), 10) }, BraggStatus::Shape);

    let mut peaks = ptr::null_mut();
    let s = unsafe { bragg_localize(frames, BraggMethod::VoigtFit, ptr::null(), 11, &mut peaks) };
    assert_eq!(s, BraggStatus::Ok, "{}", last_error());
    let n = unsafe { bragg_peaks_count(peaks) };
    assert!(n >= 12, "{n}");
    let mut close = 0;
    for i in 0..n {
        let mut pk = BraggPeak { frame_index: 0, center_y: 0.0, center_z: 0.0, amplitude: 0.0 };
        assert_eq!(unsafe { bragg_peaks_get(peaks, i, &mut pk) }, BraggStatus::Ok);
        let hit = scene
            .truth
            .iter()
            .filter(|t| t.frame_index == pk.frame_index)
            .any(|t| (t.center_y - pk.center_y).hypot(t.center_z - pk.center_z) < 0.25);
        close += hit as usize;
    }
    assert!(close * 10 >= n * 8, "{close} of {n}");
    let mut pk = BraggPeak { frame_index: 0, center_y: 0.0, center_z: 0.0, amplitude: 0.0 };
    assert_eq!(unsafe { bragg_peaks_get(peaks, n, &mut pk) }, BraggStatus::InvalidArgument);
    unsafe { bragg_peaks_free(peaks) };

    let mut nn_peaks = ptr::null_mut();
    let s = unsafe { bragg_localize(frames, BraggMethod::BraggNN, ptr::null(), 11, &mut nn_peaks) };
    assert_eq!(s, BraggStatus::NullPointer);
    let s = unsafe { bragg_localize(frames, BraggMethod::Maxima, ptr::null(), 10, &mut nn_peaks) };
    assert_eq!(s, BraggStatus::InvalidArgument);
    unsafe { bragg_frames_free(frames) };
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/bragg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["bragg_model_predict", "bragg_fit_patch", "bragg_localize", "bragg_last_error", "BRAGG_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"bragg.h\"\n\
         int main(void) {\n\
           BraggModel *m = 0;\n\
           double c[2];\n\
           if (bragg_model_init(1, 3, &m) != BRAGG_STATUS_OK) return 1;\n\
           BraggStatus s = bragg_model_predict(m, 0, 0, c);\n\
           bragg_model_free(m);\n\
           return s == BRAGG_STATUS_OK ? 0 : 2;\n\
         }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-c", "-o"])
        .arg(dir.path().join("use.o"))
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compile of the header failed"),
        Err(e) => eprintln!("skipping C compile check: cannot run {cc}: {e}"),
    }
}
