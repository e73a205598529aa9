use std::ffi::{CStr, CString};
use std::ptr;

use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlerl_ffi::*;

fn policy(logits: &[f64]) -> *mut MlerlPolicy {
    let mut p = ptr::null_mut();
    let st = unsafe { mlerl_policy_from_logits(logits.as_ptr(), logits.len(), &mut p) };
    assert_eq!(st, MlerlStatus::Ok);
    assert!(!p.is_null());
    p
}

fn last_error() -> Option<String> {
    let s = mlerl_last_error_message();
    if s.is_null() {
        return None;
    }
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { mlerl_string_free(s) };
    Some(out)
}

fn take_string(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { mlerl_string_free(s) };
    out
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(mlerl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_pointers_are_reported_and_errors_clear() {
    let st = unsafe { mlerl_policy_from_logits([1.0].as_ptr(), 1, ptr::null_mut()) };
    assert_eq!(st, MlerlStatus::NullPointer);
    assert!(last_error().unwrap().contains("out"));
    let mut x = 0.0;
    assert_eq!(
        unsafe { mlerl_sign_adjust(1.0, false, &mut x) },
        MlerlStatus::Ok
    );
    assert!(last_error().is_none());
    assert_eq!(unsafe { mlerl_policy_num_params(ptr::null()) }, 0);
    unsafe {
        mlerl_policy_free(ptr::null_mut());
        mlerl_rng_free(ptr::null_mut());
        mlerl_string_free(ptr::null_mut());
    }
}

#[test]
fn rejects_bad_logits() {
    let mut p = ptr::null_mut();
    let st = unsafe { mlerl_policy_from_logits([0.0, f64::NAN].as_ptr(), 2, &mut p) };
    assert_eq!(st, MlerlStatus::InvalidArgument);
    assert!(p.is_null());
    let st = unsafe { mlerl_policy_from_logits(ptr::null(), 0, &mut p) };
    assert_eq!(st, MlerlStatus::InvalidArgument);
}

#[test]
fn rng_matches_chacha8() {
    let rng = mlerl_rng_new(42);
    let mut oracle = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..16 {
        let mut v = 0;
        assert_eq!(unsafe { mlerl_rng_next_u64(rng, &mut v) }, MlerlStatus::Ok);
        assert_eq!(v, oracle.next_u64());
    }
    unsafe { mlerl_rng_free(rng) };
}

#[test]
fn log_prob_of_known_softmax() {
    // softmax(0, ln 2, ln 3) = (1/6, 2/6, 3/6)
    let p = policy(&[0.0, 2f64.ln(), 3f64.ln()]);
    for (a, expect) in [(0usize, 1.0 / 6.0), (1, 1.0 / 3.0), (2, 0.5)] {
        let mut lp = 0.0;
        let st = unsafe { mlerl_policy_log_prob(p, 0, &a, 1, 1.0, &mut lp) };
        assert_eq!(st, MlerlStatus::Ok);
        assert!((lp - f64::ln(expect)).abs() < 1e-12, "{a}: {lp}");
    }
    let mut lp = 0.0;
    assert_eq!(
        unsafe { mlerl_policy_log_prob(p, 0, &3, 1, 1.0, &mut lp) },
        MlerlStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { mlerl_policy_log_prob(p, 1, &0, 1, 1.0, &mut lp) },
        MlerlStatus::UnknownState
    );
    assert_eq!(
        unsafe { mlerl_policy_log_prob(p, 0, &0, 1, 0.0, &mut lp) },
        MlerlStatus::InvalidArgument
    );
    unsafe { mlerl_policy_free(p) };
}

#[test]
fn sampling_follows_softmax() {
    let p = policy(&[0.0, 2f64.ln(), 3f64.ln()]);
    let rng = mlerl_rng_new(7);
    let n = 60_000;
    let mut counts = [0usize; 3];
    let mut action = [0usize; 4];
    for _ in 0..n {
        let (mut len, mut lp) = (0, 0.0);
        let st = unsafe {
            mlerl_policy_sample(
                p,
                0,
                1.0,
                rng,
                action.as_mut_ptr(),
                action.len(),
                &mut len,
                &mut lp,
            )
        };
        assert_eq!(st, MlerlStatus::Ok);
        assert_eq!(len, 1);
        assert!((lp - [1.0f64 / 6.0, 1.0 / 3.0, 0.5][action[0]].ln()).abs() < 1e-12);
        counts[action[0]] += 1;
    }
    for (c, p) in counts.iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() < 5.0 * sd, "{counts:?}");
    }
    let (mut len, mut lp) = (0, 0.0);
    let st =
        unsafe { mlerl_policy_sample(p, 0, 1.0, rng, action.as_mut_ptr(), 0, &mut len, &mut lp) };
    assert_eq!(st, MlerlStatus::BufferTooSmall);
    unsafe {
        mlerl_rng_free(rng);
        mlerl_policy_free(p);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let logits = [0.3, -1.2, 0.8, 0.1];
    let p = policy(&logits);
    let n = logits.len();
    let mut grad = vec![0.0; n];
    let st = unsafe { mlerl_policy_accumulate_grad(p, 0, &2, 1, 1.0, grad.as_mut_ptr(), n) };
    assert_eq!(st, MlerlStatus::Ok);
    let lp = |l: &[f64]| {
        let q = policy(l);
        let mut v = 0.0;
        assert_eq!(
            unsafe { mlerl_policy_log_prob(q, 0, &2, 1, 1.0, &mut v) },
            MlerlStatus::Ok
        );
        unsafe { mlerl_policy_free(q) };
        v
    };
    let h = 1e-6;
    for j in 0..n {
        let (mut up, mut dn) = (logits, logits);
        up[j] += h;
        dn[j] -= h;
        let fd = (lp(&up) - lp(&dn)) / (2.0 * h);
        assert!((fd - grad[j]).abs() < 1e-7, "{j}: {fd} vs {}", grad[j]);
    }
    let st = unsafe { mlerl_policy_accumulate_grad(p, 0, &2, 1, 1.0, grad.as_mut_ptr(), n - 1) };
    assert_eq!(st, MlerlStatus::BufferTooSmall);
    unsafe { mlerl_policy_free(p) };
}

#[test]
fn update_steps_against_gradient_and_bumps_version() {
    let p = policy(&[1.0, 2.0]);
    assert_eq!(unsafe { mlerl_policy_version(p) }, 0);
    let mut norm = 0.0;
    let st = unsafe { mlerl_policy_apply_update(p, [3.0, 4.0].as_ptr(), 2, 0.1, 0.0, &mut norm) };
    assert_eq!(st, MlerlStatus::Ok);
    assert_eq!(norm, 5.0);
    let mut theta = [0.0; 2];
    assert_eq!(
        unsafe { mlerl_policy_params(p, theta.as_mut_ptr(), 2) },
        MlerlStatus::Ok
    );
    assert!((theta[0] - 0.7).abs() < 1e-12 && (theta[1] - 1.6).abs() < 1e-12);
    // clipped to norm 1: step is 0.1 * (0.6, 0.8)
    let st =
        unsafe { mlerl_policy_apply_update(p, [3.0, 4.0].as_ptr(), 2, 0.1, 1.0, ptr::null_mut()) };
    assert_eq!(st, MlerlStatus::Ok);
    assert_eq!(
        unsafe { mlerl_policy_params(p, theta.as_mut_ptr(), 2) },
        MlerlStatus::Ok
    );
    assert!((theta[0] - 0.64).abs() < 1e-12 && (theta[1] - 1.52).abs() < 1e-12);
    assert_eq!(unsafe { mlerl_policy_version(p) }, 2);
    let st = unsafe {
        mlerl_policy_apply_update(
            p,
            [f64::INFINITY, 0.0].as_ptr(),
            2,
            0.1,
            0.0,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MlerlStatus::Update);
    assert_eq!(unsafe { mlerl_policy_version(p) }, 2);
    let st = unsafe { mlerl_policy_apply_update(p, [1.0].as_ptr(), 1, 0.1, 0.0, ptr::null_mut()) };
    assert_eq!(st, MlerlStatus::InvalidArgument);
    assert_eq!(
        unsafe { mlerl_policy_params(p, theta.as_mut_ptr(), 1) },
        MlerlStatus::BufferTooSmall
    );
    unsafe { mlerl_policy_free(p) };
}

#[test]
fn save_load_round_trip_and_state_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let p = policy(&[0.25, -1.5, 3.0]);
    unsafe { mlerl_policy_apply_update(p, [0.1, 0.2, 0.3].as_ptr(), 3, 1.0, 0.0, ptr::null_mut()) };
    let file = CString::new(dir.path().join("policy.bin").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { mlerl_policy_save(p, file.as_ptr()) },
        MlerlStatus::Ok
    );

    // a checkpoint directory resolves to its policy.bin
    let dir_c = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut q = ptr::null_mut();
    assert_eq!(
        unsafe { mlerl_policy_load(dir_c.as_ptr(), &mut q) },
        MlerlStatus::Ok
    );
    let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
    unsafe {
        mlerl_policy_params(p, a.as_mut_ptr(), 3);
        mlerl_policy_params(q, b.as_mut_ptr(), 3);
    }
    assert_eq!(a, b);
    assert_eq!(unsafe { mlerl_policy_version(q) }, 1);
    assert_eq!(unsafe { mlerl_policy_num_states(q) }, 1);

    let task = CString::new("task").unwrap();
    let mut idx = 9;
    assert_eq!(
        unsafe { mlerl_policy_state_index(q, task.as_ptr(), MlerlMode::Scratch, &mut idx) },
        MlerlStatus::Ok
    );
    assert_eq!(idx, 0);
    let st = unsafe { mlerl_policy_state_index(q, task.as_ptr(), MlerlMode::Improve, &mut idx) };
    assert_eq!(st, MlerlStatus::UnknownState);
    let mut slots = 0;
    assert_eq!(
        unsafe { mlerl_policy_num_slots(q, 0, &mut slots) },
        MlerlStatus::Ok
    );
    assert_eq!(slots, 1);

    let mut code = ptr::null_mut();
    assert_eq!(
        unsafe { mlerl_policy_render_code(q, 0, &2, 1, &mut code) },
        MlerlStatus::Ok
    );
    assert_eq!(take_string(code).trim_end(), "print(2)");

    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    let mut r = ptr::null_mut();
    assert_eq!(
        unsafe { mlerl_policy_load(missing.as_ptr(), &mut r) },
        MlerlStatus::Io
    );
    std::fs::write(dir.path().join("junk.bin"), b"not a policy").unwrap();
    let junk = CString::new(dir.path().join("junk.bin").to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { mlerl_policy_load(junk.as_ptr(), &mut r) },
        MlerlStatus::Format
    );
    unsafe {
        mlerl_policy_free(p);
        mlerl_policy_free(q);
    }
}

#[test]
fn duration_weights_known_values() {
    let d = [1.0, 2.0, 3.0];
    let mut w = [0.0; 3];
    let st = unsafe {
        mlerl_duration_weights(d.as_ptr(), 3, true, 0.0, f64::NAN, f64::NAN, w.as_mut_ptr())
    };
    assert_eq!(st, MlerlStatus::Ok);
    assert_eq!(w, [0.5, 1.0, 1.5]);
    unsafe { mlerl_duration_weights(d.as_ptr(), 3, true, 0.0, 0.8, 1.2, w.as_mut_ptr()) };
    assert_eq!(w, [0.8, 1.0, 1.2]);
    unsafe {
        mlerl_duration_weights(
            d.as_ptr(),
            3,
            false,
            0.0,
            f64::NAN,
            f64::NAN,
            w.as_mut_ptr(),
        )
    };
    assert_eq!(w, [1.0; 3]);
    // floor 2: (2, 2, 3) / (7/3)
    unsafe { mlerl_duration_weights(d.as_ptr(), 3, true, 2.0, f64::NAN, f64::NAN, w.as_mut_ptr()) };
    for (x, e) in w.iter().zip([6.0 / 7.0, 6.0 / 7.0, 9.0 / 7.0]) {
        assert!((x - e).abs() < 1e-15);
    }
    let st = unsafe { mlerl_duration_weights(d.as_ptr(), 3, true, 0.0, 2.0, 1.0, w.as_mut_ptr()) };
    assert_eq!(st, MlerlStatus::InvalidArgument);
}

#[test]
fn frequency_law_known_values() {
    let mut out = [0.0; 2];
    let st = unsafe {
        mlerl_frequency_law(
            [0.5, 0.5].as_ptr(),
            [0.05, 0.2].as_ptr(),
            2,
            10.0,
            4,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(st, MlerlStatus::Ok);
    assert!((out[0] - 400.0).abs() < 1e-9 && (out[1] - 100.0).abs() < 1e-9);
    let st = unsafe {
        mlerl_frequency_law([1.0].as_ptr(), [0.0].as_ptr(), 1, 10.0, 4, out.as_mut_ptr())
    };
    assert_eq!(st, MlerlStatus::InvalidArgument);
}

#[test]
fn rewards() {
    assert_eq!(mlerl_invalid_reward(0), -10.0);
    assert!((mlerl_invalid_reward(3) - -9.7).abs() < 1e-12);
    assert_eq!(
        mlerl_invalid_reward(100),
        mlerl_invalid_reward(MLERL_MARKER_STAGES)
    );
    let mut r = 0.0;
    assert_eq!(
        unsafe { mlerl_sign_adjust(0.25, true, &mut r) },
        MlerlStatus::Ok
    );
    assert_eq!(r, -0.25);
    assert_eq!(
        unsafe { mlerl_sign_adjust(0.25, false, &mut r) },
        MlerlStatus::Ok
    );
    assert_eq!(r, 0.25);
    assert_eq!(
        unsafe { mlerl_sign_adjust(f64::NAN, false, &mut r) },
        MlerlStatus::InvalidArgument
    );
}

#[test]
fn marker_parsing_plain_and_nonce() {
    let out = CString::new("imported packages\nloaded data\ntraining loss: 0.5\nnoise\n").unwrap();
    let mut mask = 0;
    assert_eq!(
        unsafe { mlerl_parse_markers(out.as_ptr(), MlerlMarkerMode::Plain, 0, &mut mask) },
        MlerlStatus::Ok
    );
    assert_eq!(mask, 0b1011);

    let nonce = 0xdead_beef_u64;
    let text = format!(
        "##EI:{nonce:016x}:defined_model##\n##EI:{:016x}:trained_model##\n",
        nonce + 1
    );
    let out = CString::new(text).unwrap();
    unsafe { mlerl_parse_markers(out.as_ptr(), MlerlMarkerMode::Nonce, nonce, &mut mask) };
    assert_eq!(mask, 0b100);
    unsafe { mlerl_parse_markers(out.as_ptr(), MlerlMarkerMode::Plain, nonce, &mut mask) };
    assert_eq!(mask, 0);

    let names: Vec<_> = (0..MLERL_MARKER_STAGES)
        .map(|i| {
            unsafe { CStr::from_ptr(mlerl_marker_stage_name(i)) }
                .to_str()
                .unwrap()
        })
        .collect();
    assert_eq!(names[0], "imported_packages");
    assert_eq!(names[6], "predicted_test_labels");
    assert!(mlerl_marker_stage_name(MLERL_MARKER_STAGES).is_null());
}

#[test]
fn sanitize_neutralises_plain_markers() {
    let code = CString::new("import os\nprint(\"loaded data\")\nx = 1\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { mlerl_sanitize(code.as_ptr(), MlerlMarkerMode::Plain, 0, &mut out) },
        MlerlStatus::Ok
    );
    let clean = take_string(out);
    assert!(
        clean.lines().nth(1).unwrap().starts_with("pass  #"),
        "{clean}"
    );
    assert!(clean.contains("x = 1"));
    assert_eq!(
        unsafe { mlerl_sanitize(code.as_ptr(), MlerlMarkerMode::Nonce, 5, &mut out) },
        MlerlStatus::Ok
    );
    assert_eq!(take_string(out), code.to_str().unwrap());
}

proptest! {
    #[test]
    fn unclamped_weights_average_to_one(d in prop::collection::vec(1e-3f64..100.0, 1..32)) {
        let mut w = vec![0.0; d.len()];
        let st = unsafe { mlerl_duration_weights(d.as_ptr(), d.len(), true, 0.0, f64::NAN, f64::NAN, w.as_mut_ptr()) };
        prop_assert_eq!(st, MlerlStatus::Ok);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        for (x, y) in d.iter().zip(&w) {
            prop_assert!((y * d.iter().sum::<f64>() / d.len() as f64 - x).abs() < 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn sampled_log_prob_matches_log_prob(logits in prop::collection::vec(-5f64..5.0, 1..8), seed in any::<u64>(), t in 0.2f64..3.0) {
        let p = policy(&logits);
        let rng = mlerl_rng_new(seed);
        let mut a = [0usize; 1];
        let (mut len, mut lp, mut check) = (0, 0.0, 0.0);
        unsafe {
            prop_assert_eq!(mlerl_policy_sample(p, 0, t, rng, a.as_mut_ptr(), 1, &mut len, &mut lp), MlerlStatus::Ok);
            prop_assert_eq!(mlerl_policy_log_prob(p, 0, a.as_ptr(), len, t, &mut check), MlerlStatus::Ok);
            mlerl_rng_free(rng);
            mlerl_policy_free(p);
        }
        prop_assert!((lp - check).abs() < 1e-12);
    }
}
