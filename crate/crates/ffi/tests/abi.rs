use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use skyguard::analysis::mann_whitney_u;
use skyguard::env::{env_episode, OBS_DIM};
use skyguard::learner::HeuristicPolicy;
use skyguard::sim::{ScenarioKind, ScenarioSpec, WorldConfig};
use skyguard_ffi::*;

fn last_error() -> String {
    let p = sg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_world(seed: u64) -> *mut SgWorld {
    // SAFETY: `w` is a valid out-pointer.
    unsafe {
        let mut w = ptr::null_mut();
        assert_eq!(sg_world_new(SgScenario::Simple, seed, 1, &mut w), SgStatus::Ok);
        w
    }
}

#[test]
fn episode_through_the_abi_matches_the_library() {
    // SAFETY: every pointer passed below is live or deliberately null.
    unsafe {
        let world = new_world(21);
        let mut policy = ptr::null_mut();
        assert_eq!(sg_policy_heuristic(&mut policy), SgStatus::Ok);
        let n = sg_world_blue_count(world);
        assert_eq!(n, 5);
        let mut actions = vec![0u8; n];
        let mut rewards = vec![0.0; n];
        while sg_world_outcome(world) == SgOutcome::Running {
            assert_eq!(sg_policy_act(policy, world, actions.as_mut_ptr(), n), SgStatus::Ok);
            assert_eq!(sg_world_step(world, actions.as_ptr(), n, rewards.as_mut_ptr()), SgStatus::Ok);
            assert!(rewards.iter().all(|r| r.is_finite()));
        }
        let record =
            env_episode(&mut HeuristicPolicy, &ScenarioSpec::new(ScenarioKind::Simple, 21), &WorldConfig::mini(), None)
                .unwrap();
        assert_eq!(sg_world_tick(world), record.total_ticks);
        let expected = match record.outcome {
            skyguard::env::Outcome::Win => SgOutcome::Win,
            skyguard::env::Outcome::Loss => SgOutcome::Loss,
            skyguard::env::Outcome::Timeout => SgOutcome::Timeout,
        };
        assert_eq!(sg_world_outcome(world), expected);
        let last = record.frames.last().unwrap();
        let mut pose = [0.0; 3];
        assert_eq!(sg_world_blue_pose(world, 2, pose.as_mut_ptr()), SgStatus::Ok);
        assert_eq!(
            [pose[0], pose[1], pose[2]],
            [last.blues[2].position.x, last.blues[2].position.y, last.blues[2].heading]
        );

        assert_eq!(sg_world_step(world, actions.as_ptr(), n, ptr::null_mut()), SgStatus::EpisodeOver);
        sg_policy_free(policy);
        sg_world_free(world);
    }
}

#[test]
fn argument_errors_set_the_last_error() {
    // SAFETY: every pointer passed below is live or deliberately null.
    unsafe {
        let world = new_world(1);
        assert_eq!(sg_world_step(world, [0u8; 2].as_ptr(), 2, ptr::null_mut()), SgStatus::InvalidArgument);
        assert!(last_error().contains("2 actions for 5 drones"));
        assert_eq!(sg_world_step(world, [0u8, 1, 2, 0, 0].as_ptr(), 5, ptr::null_mut()), SgStatus::InvalidArgument);
        assert!(last_error().contains("bad action 2"));
        assert_eq!(sg_world_step(ptr::null_mut(), [0u8; 5].as_ptr(), 5, ptr::null_mut()), SgStatus::NullPointer);

        let mut obs = [0.0; SG_OBS_DIM];
        assert_eq!(sg_world_observation(world, 0, obs.as_mut_ptr(), 4), SgStatus::InvalidArgument);
        assert_eq!(sg_world_observation(world, 9, obs.as_mut_ptr(), SG_OBS_DIM), SgStatus::InvalidArgument);
        assert_eq!(sg_world_observation(world, 0, obs.as_mut_ptr(), SG_OBS_DIM), SgStatus::Ok);
        assert_eq!(SG_OBS_DIM, OBS_DIM);

        let mut policy = ptr::null_mut();
        let missing = CString::new("/nonexistent/checkpoint.json").unwrap();
        assert_eq!(sg_policy_load(missing.as_ptr(), &mut policy), SgStatus::Io);
        assert!(policy.is_null());
        assert!(last_error().contains("/nonexistent/checkpoint.json"));

        sg_world_free(world);
        sg_world_free(ptr::null_mut());
        sg_policy_free(ptr::null_mut());
        assert_eq!(sg_world_blue_count(ptr::null()), 0);
    }
}

#[test]
fn mann_whitney_matches_the_library() {
    // SAFETY: every pointer passed below is live or deliberately null.
    unsafe {
        let a = [0.2, 0.4, 0.4, 0.9, 0.1];
        let b = [0.5, 0.6, 0.8, 0.95, 0.7, 0.65];
        let mut out = SgMwuResult { u: 0.0, p_two_sided: 0.0, effect_rank_biserial: 0.0, exact: -1 };
        assert_eq!(sg_mann_whitney(a.as_ptr(), a.len(), b.as_ptr(), b.len(), &mut out), SgStatus::Ok);
        let lib = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(out.u, lib.u);
        assert_eq!(out.p_two_sided, lib.p_two_sided);
        assert_eq!(out.effect_rank_biserial, lib.effect_rank_biserial);
        assert_eq!(sg_mann_whitney(a.as_ptr(), 0, b.as_ptr(), b.len(), &mut out), SgStatus::InvalidArgument);
    }
}

#[test]
fn evaluate_heuristic_and_random() {
    // SAFETY: every pointer passed below is live or deliberately null.
    unsafe {
        let mut h = ptr::null_mut();
        let mut r = ptr::null_mut();
        assert_eq!(sg_policy_heuristic(&mut h), SgStatus::Ok);
        assert_eq!(sg_policy_random(5, &mut r), SgStatus::Ok);
        let (mut sh, mut sr) = (0.0, 0.0);
        assert_eq!(sg_evaluate(h, SgScenario::Simple, 1, 40, 3, &mut sh), SgStatus::Ok);
        assert_eq!(sg_evaluate(r, SgScenario::Simple, 1, 40, 3, &mut sr), SgStatus::Ok);
        assert!(sh > sr, "heuristic {sh} vs random {sr}");
        sg_policy_free(h);
        sg_policy_free(r);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/abi-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header_and_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libskyguard_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let out_dir = tempfile::tempdir().unwrap();
    let exe = out_dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C smoke program failed to compile");
    let run = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "exit {:?}: {stdout}", run.status.code());
    assert!(stdout.contains("u=0 p=0.057143 exact=1"), "{stdout}");
}
