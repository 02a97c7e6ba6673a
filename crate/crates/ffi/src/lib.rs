//! C ABI over the simulator, policies and the Mann-Whitney test.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `_free`. Every fallible call returns an [`SgStatus`]; on failure,
//! [`sg_last_error`] describes the most recent error on the calling thread.
//! Panics never cross the boundary: they are caught and reported as
//! [`SgStatus::Panic`].
//!
//! # Safety
//!
//! Every pointer argument must be null or valid for the access its
//! documentation describes: handles must come from the matching constructor
//! and not yet be freed, and buffers must hold at least the stated number of
//! elements. Null pointers are detected and reported.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use skyguard::analysis::{self, MwuMethod};
use skyguard::env::{ActionId, Controller, EpisodeRunner, Outcome, Policy, RandomPolicy, OBS_DIM};
use skyguard::learner::HeuristicPolicy;
use skyguard::nn::{Checkpoint, GreedyPolicy};
use skyguard::sim::{ScenarioKind, ScenarioSpec, WorldConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Simulation = 4,
    EpisodeOver = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgScenario {
    Simple = 0,
    Complex = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgOutcome {
    Running = 0,
    Win = 1,
    Loss = 2,
    Timeout = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgMwuResult {
    pub u: f64,
    pub p_two_sided: f64,
    pub effect_rank_biserial: f64,
    /// 1 when the exact null distribution was used, 0 for the normal approximation.
    pub exact: i32,
}

/// Number of features in one drone's observation.
pub const SG_OBS_DIM: usize = 12;
const _: () = assert!(SG_OBS_DIM == OBS_DIM);

/// One running episode.
pub struct SgWorld {
    runner: EpisodeRunner,
}

/// Decision rule mapping observations to actions.
pub struct SgPolicy {
    inner: Box<dyn Policy>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SgStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SgStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: caller passes either null or a valid pointer from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(SgStatus::NullPointer, format!("{what} is null")))
}

fn non_null_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as above, and the caller does not alias the handle.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(SgStatus::NullPointer, format!("{what} is null")))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(SgStatus::InvalidArgument, message.into())
}

fn world_config(mini: i32) -> WorldConfig {
    if mini != 0 {
        WorldConfig::mini()
    } else {
        WorldConfig::default()
    }
}

fn kind(scenario: SgScenario) -> ScenarioKind {
    match scenario {
        SgScenario::Simple => ScenarioKind::Simple,
        SgScenario::Complex => ScenarioKind::Complex,
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Spawns a new episode. `mini` selects the small world.
#[no_mangle]
pub unsafe extern "C" fn sg_world_new(scenario: SgScenario, seed: u64, mini: i32, out: *mut *mut SgWorld) -> SgStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let runner = EpisodeRunner::new(&ScenarioSpec::new(kind(scenario), seed), &world_config(mini))
            .map_err(|e| Failure(SgStatus::Simulation, e.to_string()))?;
        *out = Box::into_raw(Box::new(SgWorld { runner }));
        Ok(())
    })
}

/// Releases a world. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_world_free(world: *mut SgWorld) {
    if !world.is_null() {
        // SAFETY: pointer came from sg_world_new and is freed once.
        drop(unsafe { Box::from_raw(world) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn sg_world_blue_count(world: *const SgWorld) -> usize {
    // SAFETY: null or a live handle.
    unsafe { world.as_ref() }.map_or(0, |w| w.runner.world().blues.len())
}

#[no_mangle]
pub unsafe extern "C" fn sg_world_tick(world: *const SgWorld) -> u32 {
    // SAFETY: null or a live handle.
    unsafe { world.as_ref() }.map_or(0, |w| w.runner.world().tick)
}

#[no_mangle]
pub unsafe extern "C" fn sg_world_outcome(world: *const SgWorld) -> SgOutcome {
    // SAFETY: null or a live handle.
    let Some(w) = (unsafe { world.as_ref() }) else { return SgOutcome::Running };
    match w.runner.world().terminal.map(Outcome::from) {
        None => SgOutcome::Running,
        Some(Outcome::Win) => SgOutcome::Win,
        Some(Outcome::Loss) => SgOutcome::Loss,
        Some(Outcome::Timeout) => SgOutcome::Timeout,
    }
}

/// Copies drone `drone`'s observation into `out[0..SG_OBS_DIM]`.
#[no_mangle]
pub unsafe extern "C" fn sg_world_observation(
    world: *const SgWorld,
    drone: usize,
    out: *mut f64,
    len: usize,
) -> SgStatus {
    guard(|| {
        let w = non_null(world, "world")?;
        if out.is_null() {
            return Err(Failure(SgStatus::NullPointer, "out is null".into()));
        }
        if len < OBS_DIM {
            return Err(invalid(format!("buffer holds {len} values, need {OBS_DIM}")));
        }
        let obs = w.runner.observations().get(drone).ok_or_else(|| invalid(format!("no drone {drone}")))?;
        // SAFETY: out has room for len >= OBS_DIM values.
        unsafe { ptr::copy_nonoverlapping(obs.features.as_ptr(), out, OBS_DIM) };
        Ok(())
    })
}

/// Writes `x, y, heading` of blue drone `drone` into `out[0..3]`.
#[no_mangle]
pub unsafe extern "C" fn sg_world_blue_pose(world: *const SgWorld, drone: usize, out: *mut f64) -> SgStatus {
    guard(|| {
        let w = non_null(world, "world")?;
        let out = non_null_mut(out as *mut [f64; 3], "out")?;
        let b = w.runner.world().blues.get(drone).ok_or_else(|| invalid(format!("no drone {drone}")))?;
        *out = [b.pose.position.x, b.pose.position.y, b.pose.heading];
        Ok(())
    })
}

/// Writes the red drone's `x, y` into `out[0..2]`.
#[no_mangle]
pub unsafe extern "C" fn sg_world_red_position(world: *const SgWorld, out: *mut f64) -> SgStatus {
    guard(|| {
        let w = non_null(world, "world")?;
        let out = non_null_mut(out as *mut [f64; 2], "out")?;
        let p = w.runner.world().red.pose.position;
        *out = [p.x, p.y];
        Ok(())
    })
}

/// Advances one tick. `actions` holds one entry per blue drone: 0 turns
/// clockwise (input -1), 1 counter-clockwise (input +1). `rewards`, if not
/// null, receives one reward per drone.
#[no_mangle]
pub unsafe extern "C" fn sg_world_step(
    world: *mut SgWorld,
    actions: *const u8,
    n: usize,
    rewards: *mut f64,
) -> SgStatus {
    guard(|| {
        let w = non_null_mut(world, "world")?;
        if actions.is_null() {
            return Err(Failure(SgStatus::NullPointer, "actions is null".into()));
        }
        if w.runner.is_done() {
            return Err(Failure(SgStatus::EpisodeOver, "episode already ended".into()));
        }
        let count = w.runner.world().blues.len();
        if n != count {
            return Err(invalid(format!("got {n} actions for {count} drones")));
        }
        // SAFETY: actions points to n bytes.
        let raw = unsafe { std::slice::from_raw_parts(actions, n) };
        let decisions = raw
            .iter()
            .map(|&a| {
                ActionId::try_from(a).map(|a| (a, Controller::Agent)).map_err(|_| invalid(format!("bad action {a}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let result = w.runner.step(&decisions).map_err(|e| Failure(SgStatus::Simulation, e.to_string()))?;
        if !rewards.is_null() {
            for (i, t) in result.transitions.iter().enumerate() {
                // SAFETY: caller provides room for n rewards.
                unsafe { *rewards.add(i) = t.reward };
            }
        }
        Ok(())
    })
}

fn store_policy(out: *mut *mut SgPolicy, inner: Box<dyn Policy>) -> Result<(), Failure> {
    let out = non_null_mut(out, "out")?;
    *out = Box::into_raw(Box::new(SgPolicy { inner }));
    Ok(())
}

/// Greedy policy from a JSON checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn sg_policy_load(path: *const c_char, out: *mut *mut SgPolicy) -> SgStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure(SgStatus::NullPointer, "path is null".into()));
        }
        // SAFETY: path is a nul-terminated string.
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(|e| Failure(SgStatus::Io, format!("{path}: {e}")))?;
        let network = ckpt.network().map_err(|e| invalid(e.to_string()))?;
        store_policy(out, Box::new(GreedyPolicy { network }))
    })
}

/// Hand-written pursuit controller.
#[no_mangle]
pub unsafe extern "C" fn sg_policy_heuristic(out: *mut *mut SgPolicy) -> SgStatus {
    guard(|| store_policy(out, Box::new(HeuristicPolicy)))
}

/// Uniformly random actions.
#[no_mangle]
pub unsafe extern "C" fn sg_policy_random(seed: u64, out: *mut *mut SgPolicy) -> SgStatus {
    guard(|| store_policy(out, Box::new(RandomPolicy::new(seed))))
}

#[no_mangle]
pub unsafe extern "C" fn sg_policy_free(policy: *mut SgPolicy) {
    if !policy.is_null() {
        // SAFETY: pointer came from an sg_policy_* constructor and is freed once.
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// Writes one action per blue drone of `world` into `out[0..n]`.
#[no_mangle]
pub unsafe extern "C" fn sg_policy_act(
    policy: *mut SgPolicy,
    world: *const SgWorld,
    out: *mut u8,
    n: usize,
) -> SgStatus {
    guard(|| {
        let p = non_null_mut(policy, "policy")?;
        let w = non_null(world, "world")?;
        if out.is_null() {
            return Err(Failure(SgStatus::NullPointer, "out is null".into()));
        }
        let actions = p.inner.act(&w.runner.views());
        if n < actions.len() {
            return Err(invalid(format!("buffer holds {n} actions, need {}", actions.len())));
        }
        for (i, a) in actions.into_iter().enumerate() {
            // SAFETY: i < n.
            unsafe { *out.add(i) = u8::from(a) };
        }
        Ok(())
    })
}

/// Greedy success rate of `policy` over `episodes` evaluation scenarios.
#[no_mangle]
pub unsafe extern "C" fn sg_evaluate(
    policy: *mut SgPolicy,
    scenario: SgScenario,
    mini: i32,
    episodes: usize,
    seed: u64,
    out_success_rate: *mut f64,
) -> SgStatus {
    guard(|| {
        let p = non_null_mut(policy, "policy")?;
        let out = non_null_mut(out_success_rate, "out_success_rate")?;
        let summary = analysis::evaluate(&mut p.inner, kind(scenario), &world_config(mini), episodes, seed)
            .map_err(|e| Failure(SgStatus::Simulation, e.to_string()))?;
        *out = summary.success_rate();
        Ok(())
    })
}

/// Two-sided Mann-Whitney U test of sample `a` against sample `b`.
#[no_mangle]
pub unsafe extern "C" fn sg_mann_whitney(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut SgMwuResult,
) -> SgStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(Failure(SgStatus::NullPointer, "sample is null".into()));
        }
        let out = non_null_mut(out, "out")?;
        // SAFETY: a and b point to na and nb values.
        let (a, b) = unsafe { (std::slice::from_raw_parts(a, na), std::slice::from_raw_parts(b, nb)) };
        let r = analysis::mann_whitney_u(a, b).map_err(|e| invalid(e.to_string()))?;
        *out = SgMwuResult {
            u: r.u,
            p_two_sided: r.p_two_sided,
            effect_rank_biserial: r.effect_rank_biserial,
            exact: i32::from(r.method == MwuMethod::Exact),
        };
        Ok(())
    })
}
