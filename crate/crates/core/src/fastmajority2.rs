//! Worker/clock protocol: the population splits into clock nodes, which
//! keep a step counter modulo one epoch by counting interactions with other
//! clocks, and worker nodes, which carry tokens and advance through stages
//! by reading clocks. Workers hold no step counters, so the whole node
//! state space stays linear in log n.
//!
//! The initialization rule is the single declared asymmetric transition:
//! two unassigned nodes turn into one clock (the initiator) and one worker
//! holding both tokens, merged conservation-exactly (opposites cancel,
//! equals form one heavy token of doubled value, born out of sync).

use crate::engine::InputInstance;
use crate::fastmajority1::{Fm1Params, ParamsError, Snap};
use crate::protocol::{
    scaled_token_value, terminator_propagation, token_char, FastProtocol, NodeStatus, Opinion,
    Token,
};

pub const DEFAULT_BIG_C: f64 = 32.0;
/// Stage zone fractions of a phase: ends of beginning, canceling, middle,
/// doubling (ending runs to the phase end). Mirrors the buffer/stage
/// proportions of the logarithmic-phase protocol.
pub const DEFAULT_STAGE_FRACS: [f64; 4] = [0.1, 0.5, 0.6, 0.9];

/// Stage flag a worker tracks within a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Stage {
    Beginning = 0,
    Canceling = 1,
    Middle = 2,
    Doubling = 3,
    Ending = 4,
}

impl Stage {
    pub fn from_index(i: u32) -> Stage {
        match i {
            0 => Stage::Beginning,
            1 => Stage::Canceling,
            2 => Stage::Middle,
            3 => Stage::Doubling,
            _ => Stage::Ending,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Stage::Beginning => 'b',
            Stage::Canceling => 'c',
            Stage::Middle => 'm',
            Stage::Doubling => 'd',
            Stage::Ending => 'e',
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fm2Params {
    pub inner: Fm1Params,
    pub stage_fracs: [f64; 4],
    /// Clock steps per additional-epoch phase: one full clock cycle holds
    /// exactly the 3P additional phases.
    pub ae_quantum: u32,
    /// Quarter of the epoch, for the wrap windows of the clock ring.
    pub quarter: u32,
}

impl Fm2Params {
    pub fn new(
        n: usize,
        big_c: f64,
        stage_fracs: [f64; 4],
        slack_kappa: f64,
    ) -> Result<Fm2Params, ParamsError> {
        let inner = Fm1Params::new(n, big_c, None, slack_kappa)?;
        let ae_quantum = (inner.epoch_len / inner.add_phases).max(1);
        let quarter = inner.epoch_len / 4;
        Ok(Fm2Params {
            inner,
            stage_fracs,
            ae_quantum,
            quarter,
        })
    }

    pub fn defaults(n: usize) -> Fm2Params {
        Fm2Params::new(
            n,
            DEFAULT_BIG_C,
            DEFAULT_STAGE_FRACS,
            crate::fastmajority1::DEFAULT_SLACK_KAPPA,
        )
        .expect("defaults fit")
    }

    fn stage_of(&self, off: u32, len: u32) -> Stage {
        let f = |x: f64| (len as f64 * x).floor() as u32;
        if off < f(self.stage_fracs[0]) {
            Stage::Beginning
        } else if off < f(self.stage_fracs[1]) {
            Stage::Canceling
        } else if off < f(self.stage_fracs[2]) {
            Stage::Middle
        } else if off < f(self.stage_fracs[3]) {
            Stage::Doubling
        } else {
            Stage::Ending
        }
    }
}

/// What a worker learns from a clock's counter: epoch part, phase within
/// the part, stage within the phase, and the combined progress bucket
/// (global phase * 5 + stage index) used for forward-only adoption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockReading {
    pub part: u8,
    pub phase: u8,
    pub stage: Stage,
    pub bucket: u8,
}

/// Maps a clock step to (epoch_part, phase, stage).
pub fn clock_reading_to_stage(p: &Fm2Params, step: u32) -> ClockReading {
    let g = &p.inner;
    debug_assert!(step < g.epoch_len);
    let part = (step >= g.first_part_len) as u8;
    let pos = step - part as u32 * g.first_part_len;
    let phase = g.phase_of(pos);
    let lo = g.phase_bounds[phase as usize];
    let hi = g.phase_bounds[phase as usize + 1];
    let stage = p.stage_of(pos - lo, hi - lo);
    let gp = part as u32 * g.phases + phase;
    ClockReading {
        part,
        phase: phase as u8,
        stage,
        bucket: (gp * 5 + stage as u32) as u8,
    }
}

/// Additional-epoch reading: one clock cycle divided into 3P phases of
/// `ae_quantum` steps (the last phase absorbs the remainder).
pub fn clock_reading_additional(p: &Fm2Params, step: u32) -> ClockReading {
    let g = &p.inner;
    let phase = (step / p.ae_quantum).min(g.add_phases - 1);
    let lo = phase * p.ae_quantum;
    let hi = if phase == g.add_phases - 1 {
        g.epoch_len
    } else {
        lo + p.ae_quantum
    };
    let stage = p.stage_of(step - lo, hi - lo);
    ClockReading {
        part: 2,
        phase: phase as u8,
        stage,
        bucket: (phase * 5 + stage as u32) as u8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockState {
    pub step: u16,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerState {
    pub token: Token,
    pub heavy: bool,
    /// j_f when in additional mode.
    pub epoch: u8,
    /// Age within the epoch; global age in additional mode.
    pub age: u8,
    /// Recorded progress: global phase * 5 + stage (additional phase * 5 +
    /// stage in additional mode).
    pub bucket: u8,
    pub doubled: bool,
    pub out_of_sync: bool,
    pub additional: bool,
    /// Additional-epoch doubling-stage meetings this phase, saturating.
    pub stage_meets: u8,
    pub status: NodeStatus,
    pub snaps: [Snap; 3],
}

impl WorkerState {
    fn fresh(token: Token) -> WorkerState {
        WorkerState {
            token,
            heavy: false,
            epoch: 0,
            age: 0,
            bucket: 0,
            doubled: false,
            out_of_sync: false,
            additional: false,
            stage_meets: 0,
            status: NodeStatus::Active,
            snaps: [Snap::of(token, false), Snap::Unset, Snap::Unset],
        }
    }

    #[inline]
    fn gp(&self) -> u32 {
        self.bucket as u32 / 5
    }

    #[inline]
    fn stage(&self) -> Stage {
        Stage::from_index(self.bucket as u32 % 5)
    }

    #[inline]
    fn in_second_part(&self, p: &Fm2Params) -> bool {
        !self.additional && self.gp() >= p.inner.phases
    }

    #[inline]
    fn normal(&self) -> bool {
        !self.out_of_sync && !self.heavy && !self.additional && self.status == NodeStatus::Active
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fm2State {
    Unassigned(Opinion),
    Clock(ClockState),
    Worker(WorkerState),
}

impl Fm2State {
    pub fn status(&self) -> NodeStatus {
        match self {
            Fm2State::Unassigned(_) => NodeStatus::Active,
            Fm2State::Clock(c) => c.status,
            Fm2State::Worker(w) => w.status,
        }
    }

    fn set_status(&mut self, st: NodeStatus) {
        match self {
            // A terminator reaching a still-unassigned node converts it to
            // a worker keeping its token frozen.
            Fm2State::Unassigned(op) => {
                let mut w = WorkerState::fresh(Some(*op));
                w.status = st;
                *self = Fm2State::Worker(w);
            }
            Fm2State::Clock(c) => c.status = st,
            Fm2State::Worker(w) => w.status = st,
        }
    }
}

/// Drop rule for the out-of-sync flag, and the heavy flag bookkeeping after
/// splits: reaching the target age in the second epoch part clears it.
#[inline]
fn drop_out_of_sync(p: &Fm2Params, w: &mut WorkerState) {
    if w.out_of_sync && w.in_second_part(p) && w.age as u32 == p.inner.phases {
        w.out_of_sync = false;
    }
}

/// Worker phase-rollover bookkeeping when its adopted reading crosses into
/// global phase `k`: a normal token that failed to double goes out of sync.
fn cross_phase(p: &Fm2Params, w: &mut WorkerState, k: u32) {
    if k > p.inner.phases {
        return; // pseudo-boundaries inside the second part
    }
    if w.token.is_some() && !w.out_of_sync && !w.heavy {
        if w.doubled {
            w.doubled = false;
        } else {
            w.out_of_sync = true;
        }
    }
}

/// Epoch rollover for a worker that saw its clock wrap: tokens short of the
/// target age trigger the additional epoch; reaching the epoch cap fails.
fn worker_epoch_rollover(p: &Fm2Params, w: &mut WorkerState) {
    if w.token.is_some() && (w.age as u32) < p.inner.phases {
        let j_f = w.epoch;
        worker_trigger_additional(p, w, j_f);
        return;
    }
    w.epoch += 1;
    if w.epoch >= p.inner.e_max {
        w.status = NodeStatus::Fail;
        return;
    }
    w.age = 0;
    w.bucket = 0;
    w.doubled = false;
    w.out_of_sync = false;
    w.snaps = [Snap::of(w.token, w.heavy), w.snaps[0], w.snaps[1]];
}

/// Restore from the snapshot at the start of epoch max(j_f - 1, 0) and
/// enter the additional epoch.
pub fn worker_trigger_additional(p: &Fm2Params, w: &mut WorkerState, j_f: u8) {
    let target = j_f.saturating_sub(1);
    let diff = w.epoch as i32 - target as i32;
    if !(0..=2).contains(&diff) {
        w.status = NodeStatus::Fail;
        return;
    }
    match w.snaps[diff as usize].token() {
        None => w.status = NodeStatus::Fail,
        Some((token, heavy)) => {
            w.token = token;
            w.heavy = heavy;
            w.age = (target as u32 * p.inner.phases) as u8;
            w.epoch = j_f;
            w.bucket = 0;
            w.doubled = false;
            w.out_of_sync = false;
            w.stage_meets = 0;
            w.additional = true;
        }
    }
}

/// Clock-clock interaction: consistency on the circular distance, pull-up
/// across the epoch boundary, plain increments otherwise.
pub fn clock_clock_delta(p: &Fm2Params, c1: &mut ClockState, c2: &mut ClockState) {
    let len = p.inner.epoch_len;
    let s1 = c1.step as u32;
    let s2 = c2.step as u32;
    let diff = s1.abs_diff(s2);
    let d = diff.min(len - diff);
    if d > p.inner.tau {
        c1.status = NodeStatus::Fail;
        c2.status = NodeStatus::Fail;
        return;
    }
    let (lo, hi) = if s1 <= s2 { (&mut *c1, &mut *c2) } else { (&mut *c2, &mut *c1) };
    if (hi.step as u32) >= len - p.quarter && (lo.step as u32) < p.quarter {
        // The trailing node (largest counter, about to wrap) is pulled up
        // to step 0 of the next epoch; the node ahead ticks.
        hi.step = 0;
        lo.step += 1;
        if lo.step as u32 == len {
            lo.step = 0;
        }
        return;
    }
    for c in [lo, hi] {
        c.step += 1;
        if c.step as u32 == len {
            c.step = 0;
        }
    }
}

/// Worker adopts a same-epoch reading that is ahead of its recorded
/// progress, settling phase-rollover bookkeeping for every boundary
/// crossed. Readings more than half a cycle ahead are stale clocks still
/// finishing the previous epoch and are ignored.
fn adopt_forward(p: &Fm2Params, w: &mut WorkerState, reading: ClockReading) {
    if reading.bucket <= w.bucket {
        return;
    }
    if (reading.bucket - w.bucket) as u32 > 5 * p.inner.phases {
        return;
    }
    let from_gp = w.gp();
    let to_gp = reading.bucket as u32 / 5;
    for k in (from_gp + 1)..=to_gp {
        cross_phase(p, w, k);
    }
    w.bucket = reading.bucket;
    drop_out_of_sync(p, w);
}

/// Worker-clock interaction. The clock is unchanged except when the pair
/// is declared inconsistent.
pub fn worker_clock_delta(p: &Fm2Params, w: &mut WorkerState, c: &mut ClockState) {
    let step = c.step as u32;
    if w.additional {
        let reading = clock_reading_additional(p, step);
        let last = (p.inner.add_phases - 1) * 5;
        if step < p.quarter && w.bucket as u32 >= last + Stage::Doubling as u32 {
            // The additional cycle wrapped under the worker: done on a
            // token whose evidenced final doubling failed, fail otherwise.
            match w.token {
                Some(tok)
                    if !w.doubled
                        && !w.heavy
                        && w.stage_meets >= crate::majority::DONE_EVIDENCE_MIN =>
                {
                    w.status = NodeStatus::Done(tok)
                }
                _ => w.status = NodeStatus::Fail,
            }
            return;
        }
        // Forward-window adoption; readings more than half a cycle ahead
        // are stale clocks still finishing the previous epoch.
        if reading.bucket > w.bucket
            && (reading.bucket - w.bucket) as u32 <= (p.inner.add_phases * 5) / 2
        {
            let from = w.bucket as u32 / 5;
            let to = reading.bucket as u32 / 5;
            for _ in from..to {
                advance_ae_phase(w);
                if w.status != NodeStatus::Active {
                    return;
                }
            }
            w.bucket = reading.bucket;
        }
        return;
    }

    if step < p.quarter && w.in_second_part(p) {
        // The clock shows a fresh epoch while the worker has finished its
        // phases: epoch rollover.
        worker_epoch_rollover(p, w);
        if w.status == NodeStatus::Active && !w.additional {
            adopt_forward(p, w, clock_reading_to_stage(p, step));
        }
        return;
    }
    // A first-quarter reading against a first-part worker is ambiguous (a
    // trailing clock looks the same as a fresh epoch), so no fail verdict
    // here; runaway desync is caught by the worker-worker epoch gap rule.
    adopt_forward(p, w, clock_reading_to_stage(p, step));
}

/// One additional-epoch phase boundary for a worker: an evidenced failed
/// doubling means done; a token that merely missed its doubling window
/// carries on at its lagging age and keeps splitting in later phases.
fn advance_ae_phase(w: &mut WorkerState) {
    if let Some(tok) = w.token {
        if !w.doubled && !w.heavy && w.stage_meets >= crate::majority::DONE_EVIDENCE_MIN {
            w.status = NodeStatus::Done(tok);
            return;
        }
    }
    w.doubled = false;
    w.stage_meets = 0;
}

/// Worker-worker interaction: cancel and double keyed on recorded stages;
/// out-of-sync and heavy tokens split against empty partners of the same
/// epoch; no counters exist to advance.
pub fn worker_worker_delta(p: &Fm2Params, w1: &mut WorkerState, w2: &mut WorkerState) {
    match (w1.additional, w2.additional) {
        (true, true) => {
            if w1.epoch != w2.epoch {
                w1.status = NodeStatus::Fail;
                w2.status = NodeStatus::Fail;
                return;
            }
            ae_worker_pair(w1, w2);
        }
        (true, false) => {
            let j_f = w1.epoch;
            worker_trigger_additional(p, w2, j_f);
        }
        (false, true) => {
            let j_f = w2.epoch;
            worker_trigger_additional(p, w1, j_f);
        }
        (false, false) => {
            let e1 = w1.epoch as i32;
            let e2 = w2.epoch as i32;
            if (e1 - e2).abs() >= 2 {
                w1.status = NodeStatus::Fail;
                w2.status = NodeStatus::Fail;
                return;
            }
            if e1 != e2 {
                return;
            }
            normal_worker_pair(p, w1, w2);
        }
    }
}

fn normal_worker_pair(p: &Fm2Params, w1: &mut WorkerState, w2: &mut WorkerState) {
    // Heavy split: one heavy token against an empty node becomes two plain
    // age-0 tokens, which rejoin the regular phase flow; a child that is
    // already behind its phase will be flagged out of sync at its next
    // phase rollover like any other token that missed a split.
    let heavy_split = |from: &mut WorkerState, to: &mut WorkerState| {
        to.token = from.token;
        to.age = from.age;
        from.heavy = false;
        to.heavy = false;
        from.out_of_sync = false;
        to.out_of_sync = false;
        from.doubled = false;
        to.doubled = false;
    };
    if w1.heavy && w2.token.is_none() {
        heavy_split(w1, w2);
    } else if w2.heavy && w1.token.is_none() {
        heavy_split(w2, w1);
    } else if w1.out_of_sync && (w1.age as u32) < p.inner.phases && w2.token.is_none() {
        oos_split(w1, w2);
    } else if w2.out_of_sync && (w2.age as u32) < p.inner.phases && w1.token.is_none() {
        oos_split(w2, w1);
    } else if w1.normal() && w2.normal() && w1.gp() == w2.gp() && w1.gp() < p.inner.phases {
        let in_doubling = |s: Stage| matches!(s, Stage::Doubling | Stage::Ending);
        if w1.stage() == Stage::Canceling && w2.stage() == Stage::Canceling {
            if let (Some(x), Some(y)) = (w1.token, w2.token) {
                if x != y && w1.age == w2.age {
                    w1.token = None;
                    w2.token = None;
                }
            }
        } else if in_doubling(w1.stage()) && in_doubling(w2.stage()) {
            let split = |from: &mut WorkerState, to: &mut WorkerState| {
                to.token = from.token;
                let age = from.age + 1;
                from.age = age;
                to.age = age;
                from.doubled = true;
                to.doubled = true;
            };
            if w1.token.is_some() && !w1.doubled && w2.token.is_none() {
                split(w1, w2);
            } else if w2.token.is_some() && !w2.doubled && w1.token.is_none() {
                split(w2, w1);
            }
        }
    }
    drop_out_of_sync(p, w1);
    drop_out_of_sync(p, w2);
}

fn oos_split(from: &mut WorkerState, to: &mut WorkerState) {
    to.token = from.token;
    let age = from.age + 1;
    from.age = age;
    to.age = age;
    from.out_of_sync = true;
    to.out_of_sync = true;
    to.doubled = false;
}

fn ae_worker_pair(w1: &mut WorkerState, w2: &mut WorkerState) {
    let heavy_split = |from: &mut WorkerState, to: &mut WorkerState| {
        to.token = from.token;
        to.age = from.age;
        from.heavy = false;
        to.heavy = false;
    };
    if w1.heavy && w2.token.is_none() {
        heavy_split(w1, w2);
        return;
    }
    if w2.heavy && w1.token.is_none() {
        heavy_split(w2, w1);
        return;
    }
    let same_phase = w1.bucket / 5 == w2.bucket / 5;
    if !same_phase {
        return;
    }
    let in_doubling = |s: Stage| matches!(s, Stage::Doubling | Stage::Ending);
    if w1.stage() == Stage::Canceling && w2.stage() == Stage::Canceling {
        if let (Some(x), Some(y)) = (w1.token, w2.token) {
            if x != y && w1.age == w2.age && !w1.heavy && !w2.heavy {
                w1.token = None;
                w2.token = None;
            }
        }
    } else if in_doubling(w1.stage()) && in_doubling(w2.stage()) {
        w1.stage_meets = (w1.stage_meets + 1).min(crate::majority::DONE_EVIDENCE_MIN);
        w2.stage_meets = (w2.stage_meets + 1).min(crate::majority::DONE_EVIDENCE_MIN);
        let split = |from: &mut WorkerState, to: &mut WorkerState| {
            to.token = from.token;
            let age = from.age + 1;
            from.age = age;
            to.age = age;
            from.doubled = true;
            to.doubled = true;
        };
        if w1.token.is_some() && !w1.doubled && !w1.heavy && w2.token.is_none() {
            split(w1, w2);
        } else if w2.token.is_some() && !w2.doubled && !w2.heavy && w1.token.is_none() {
            split(w2, w1);
        }
    }
}

/// The FastMajority2 protocol packaged for the extended composition.
pub struct FastMajority2 {
    instance: InputInstance,
    params: Fm2Params,
}

impl FastMajority2 {
    pub fn new(instance: InputInstance, params: Fm2Params) -> FastMajority2 {
        FastMajority2 { instance, params }
    }

    pub fn with_defaults(instance: InputInstance) -> FastMajority2 {
        let params = Fm2Params::defaults(instance.n());
        FastMajority2 { instance, params }
    }

    pub fn params(&self) -> &Fm2Params {
        &self.params
    }

    /// Initialization rule (the declared asymmetric transition) and the
    /// full dispatch over role pairs.
    pub fn delta(&self, a: &mut Fm2State, b: &mut Fm2State) {
        if let Some((na, nb)) = terminator_propagation(a.status(), b.status()) {
            a.set_status(na);
            b.set_status(nb);
            return;
        }
        let p = &self.params;
        match (&mut *a, &mut *b) {
            (Fm2State::Unassigned(x), Fm2State::Unassigned(y)) => {
                let worker = if *x != *y {
                    WorkerState::fresh(None)
                } else {
                    let mut w = WorkerState::fresh(Some(*x));
                    w.heavy = true;
                    w.out_of_sync = true;
                    w
                };
                *a = Fm2State::Clock(ClockState {
                    step: 0,
                    status: NodeStatus::Active,
                });
                *b = Fm2State::Worker(worker);
            }
            (Fm2State::Unassigned(x), _) => {
                *a = Fm2State::Worker(WorkerState::fresh(Some(*x)));
            }
            (_, Fm2State::Unassigned(y)) => {
                *b = Fm2State::Worker(WorkerState::fresh(Some(*y)));
            }
            (Fm2State::Clock(c1), Fm2State::Clock(c2)) => clock_clock_delta(p, c1, c2),
            (Fm2State::Worker(w), Fm2State::Clock(c)) => worker_clock_delta(p, w, c),
            (Fm2State::Clock(c), Fm2State::Worker(w)) => worker_clock_delta(p, w, c),
            (Fm2State::Worker(w1), Fm2State::Worker(w2)) => worker_worker_delta(p, w1, w2),
        }
    }
}

impl FastProtocol for FastMajority2 {
    type State = Fm2State;

    fn name(&self) -> &'static str {
        "fastmajority2"
    }

    fn instance(&self) -> &InputInstance {
        &self.instance
    }

    fn initial_state(&self, node: usize) -> Fm2State {
        Fm2State::Unassigned(if node < self.instance.a0() {
            Opinion::A
        } else {
            Opinion::B
        })
    }

    fn apply(&self, a: &mut Fm2State, b: &mut Fm2State) {
        self.delta(a, b);
    }

    fn status(&self, s: &Fm2State) -> NodeStatus {
        s.status()
    }

    fn token_opinion(&self, s: &Fm2State) -> Option<Opinion> {
        match s {
            Fm2State::Unassigned(op) => Some(*op),
            Fm2State::Clock(_) => None,
            Fm2State::Worker(w) => w.token,
        }
    }

    fn scaled_value(&self, s: &Fm2State) -> i64 {
        match s {
            Fm2State::Unassigned(op) => scaled_token_value(*op, 0),
            Fm2State::Clock(_) => 0,
            Fm2State::Worker(w) => match w.token {
                Some(op) => {
                    let g = if w.additional {
                        w.age as u32
                    } else {
                        w.epoch as u32 * self.params.inner.phases + w.age as u32
                    };
                    let v = scaled_token_value(op, g);
                    if w.heavy {
                        v * 2
                    } else {
                        v
                    }
                }
                None => 0,
            },
        }
    }

    fn ends_conservation(&self, s: &Fm2State) -> bool {
        match s {
            Fm2State::Worker(w) => w.status == NodeStatus::Fail || w.additional,
            Fm2State::Clock(c) => c.status == NodeStatus::Fail,
            Fm2State::Unassigned(_) => false,
        }
    }

    fn out_of_sync(&self, s: &Fm2State) -> bool {
        matches!(s, Fm2State::Worker(w) if w.out_of_sync)
    }

    fn additional_epoch(&self, s: &Fm2State) -> bool {
        matches!(s, Fm2State::Worker(w) if w.additional)
    }

    fn epoch(&self, s: &Fm2State) -> Option<u8> {
        match s {
            Fm2State::Worker(w) => Some(w.epoch),
            _ => None,
        }
    }

    fn encode(&self, s: &Fm2State) -> String {
        match s {
            Fm2State::Unassigned(op) => format!("U2:{}", op.as_char()),
            Fm2State::Clock(c) => format!("C2:{}:{}", c.step, status_flags(c.status, "")),
            Fm2State::Worker(w) => {
                let mut flags = String::new();
                if w.doubled {
                    flags.push('d');
                }
                if w.out_of_sync {
                    flags.push('o');
                }
                let part = if w.additional {
                    "a".to_string()
                } else if w.in_second_part(&self.params) {
                    "1".to_string()
                } else {
                    "0".to_string()
                };
                format!(
                    "W2:{}:{}:{}:{}:{}:{}:{}",
                    token_char(w.token),
                    w.heavy as u8,
                    w.epoch,
                    w.age,
                    part,
                    w.stage().as_char(),
                    status_flags(w.status, &flags)
                )
            }
        }
    }

    fn state_key(&self, s: &Fm2State) -> u64 {
        match s {
            Fm2State::Unassigned(op) => 0b01 | (*op as u64) << 2,
            Fm2State::Clock(c) => {
                0b10 | (c.step as u64) << 2 | status_bits(c.status) << 20
            }
            Fm2State::Worker(w) => {
                let tok = match w.token {
                    None => 0u64,
                    Some(Opinion::A) => 1,
                    Some(Opinion::B) => 2,
                };
                let snaps = w.snaps.iter().fold(0u64, |acc, sn| acc * 6 + *sn as u64);
                0b11 | tok << 2
                    | (w.heavy as u64) << 4
                    | (w.epoch as u64) << 5
                    | (w.age as u64) << 10
                    | (w.bucket as u64) << 16
                    | (w.doubled as u64) << 24
                    | (w.out_of_sync as u64) << 25
                    | (w.additional as u64) << 26
                    | status_bits(w.status) << 27
                    | snaps << 29
                    | (w.stage_meets as u64) << 38
            }
        }
    }

    fn classify(&self, s: &Fm2State) -> (String, Option<(u32, u32)>) {
        match s {
            Fm2State::Unassigned(op) => (format!("unassigned:{}", op.as_char()), None),
            Fm2State::Clock(c) => (
                format!("clock:{}", status_flags(c.status, "")),
                Some((0, c.step as u32 / (self.params.inner.epoch_len / 8).max(1))),
            ),
            Fm2State::Worker(w) => {
                let mut flags = String::new();
                if w.heavy {
                    flags.push('h');
                }
                if w.out_of_sync {
                    flags.push('o');
                }
                if w.additional {
                    flags.push('x');
                }
                let g = if w.additional {
                    w.age as u32
                } else {
                    w.epoch as u32 * self.params.inner.phases + w.age as u32
                };
                (
                    format!(
                        "worker:{}:{}:{}",
                        token_char(w.token),
                        g,
                        status_flags(w.status, &flags)
                    ),
                    Some((w.epoch as u32, w.bucket as u32)),
                )
            }
        }
    }
}

fn status_flags(status: NodeStatus, extra: &str) -> String {
    let mut f = String::from(extra);
    match status {
        NodeStatus::Done(Opinion::A) => f.push_str("DA"),
        NodeStatus::Done(Opinion::B) => f.push_str("DB"),
        NodeStatus::Fail => f.push('F'),
        NodeStatus::Active => {}
    }
    if f.is_empty() {
        f.push('-');
    }
    f
}

fn status_bits(status: NodeStatus) -> u64 {
    match status {
        NodeStatus::Active => 0,
        NodeStatus::Done(Opinion::A) => 1,
        NodeStatus::Done(Opinion::B) => 2,
        NodeStatus::Fail => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(n: usize, a0: usize) -> FastMajority2 {
        FastMajority2::with_defaults(InputInstance::new(n, a0).unwrap())
    }

    fn clock(step: u16) -> Fm2State {
        Fm2State::Clock(ClockState {
            step,
            status: NodeStatus::Active,
        })
    }

    #[test]
    fn init_opposite_tokens_cancel_into_empty_worker() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let mut a = Fm2State::Unassigned(Opinion::A);
        let mut b = Fm2State::Unassigned(Opinion::B);
        p.delta(&mut a, &mut b);
        assert_eq!(
            a,
            clock(0),
            "initiator becomes the clock at step 0"
        );
        match b {
            Fm2State::Worker(w) => {
                assert_eq!(w.token, None);
                assert!(!w.heavy);
            }
            _ => panic!("responder must become a worker"),
        }
    }

    #[test]
    fn init_equal_tokens_merge_into_heavy_out_of_sync_worker() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let mut a = Fm2State::Unassigned(Opinion::A);
        let mut b = Fm2State::Unassigned(Opinion::A);
        p.delta(&mut a, &mut b);
        match b {
            Fm2State::Worker(w) => {
                assert_eq!(w.token, Some(Opinion::A));
                assert!(w.heavy);
                assert!(w.out_of_sync);
                assert_eq!(w.age, 0);
            }
            _ => panic!("responder must become a worker"),
        }
        // Conservation: value 1 + 1 = one heavy token of value 2.
        assert_eq!(
            p.scaled_value(&b),
            2 * scaled_token_value(Opinion::A, 0)
        );
        assert_eq!(p.scaled_value(&a), 0);
    }

    #[test]
    fn init_single_side_assignment() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let mut a = Fm2State::Unassigned(Opinion::B);
        let mut b = Fm2State::Worker(WorkerState::fresh(None));
        let before = b;
        p.delta(&mut a, &mut b);
        match a {
            Fm2State::Worker(w) => {
                assert_eq!(w.token, Some(Opinion::B));
                assert_eq!(w.age, 0);
            }
            _ => panic!("unassigned side must become a worker"),
        }
        assert_eq!(b, before, "assigned side unchanged");
    }

    #[test]
    fn clock_pair_plain_increment() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let mut a = clock(5);
        let mut b = clock(9);
        p.delta(&mut a, &mut b);
        assert_eq!(a, clock(6));
        assert_eq!(b, clock(10));
    }

    #[test]
    fn clock_wrap_pulls_trailing_node_up() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let len = p.params().inner.epoch_len;
        let mut a = clock((len - 3) as u16);
        let mut b = clock(2);
        p.delta(&mut a, &mut b);
        assert_eq!(a, clock(0), "trailing node jumps to the next epoch start");
        assert_eq!(b, clock(3));
    }

    #[test]
    fn clock_half_epoch_apart_fails() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let len = p.params().inner.epoch_len;
        let mut a = clock(0);
        let mut b = clock((len / 2) as u16);
        p.delta(&mut a, &mut b);
        assert_eq!(a.status(), NodeStatus::Fail);
        assert_eq!(b.status(), NodeStatus::Fail);
    }

    #[test]
    fn reading_maps_steps_to_stages() {
        let p = proto(1 << 12, (1 << 11) + 1).params().clone();
        let r0 = clock_reading_to_stage(&p, 0);
        assert_eq!((r0.part, r0.phase, r0.stage), (0, 0, Stage::Beginning));

        let phase_len = p.inner.phase_bounds[1] - p.inner.phase_bounds[0];
        let r = clock_reading_to_stage(&p, (phase_len as f64 * 0.3) as u32);
        assert_eq!(r.stage, Stage::Canceling);

        let r1 = clock_reading_to_stage(&p, p.inner.first_part_len);
        assert_eq!(r1.part, 1);
    }

    #[test]
    fn worker_adopts_forward_stage_readings() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let mut w = WorkerState::fresh(Some(Opinion::A));
        w.bucket = 5 * 2 + Stage::Canceling as u8; // phase 2, canceling
        let doubling_step = pp.inner.phase_bounds[2]
            + ((pp.inner.phase_bounds[3] - pp.inner.phase_bounds[2]) as f64 * 0.7) as u32;
        let mut c = ClockState {
            step: doubling_step as u16,
            status: NodeStatus::Active,
        };
        worker_clock_delta(pp, &mut w, &mut c);
        assert_eq!(w.stage(), Stage::Doubling);
        assert_eq!(w.gp(), 2);
    }

    #[test]
    fn rollover_by_reading_sets_out_of_sync_on_undoubled_token() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let mut w = WorkerState::fresh(Some(Opinion::A));
        w.bucket = Stage::Ending as u8; // phase 0 ending, not doubled
        let in_phase1 = pp.inner.phase_bounds[1] + 1;
        let mut c = ClockState {
            step: in_phase1 as u16,
            status: NodeStatus::Active,
        };
        worker_clock_delta(pp, &mut w, &mut c);
        assert!(w.out_of_sync, "failed to split in phase 0");
        assert_eq!(w.gp(), 1);
    }

    #[test]
    fn wrap_reading_with_young_token_triggers_additional_epoch() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let mut w = WorkerState::fresh(Some(Opinion::A));
        w.epoch = 1;
        w.age = 1;
        w.out_of_sync = true;
        w.snaps = [Snap::TokA, Snap::TokA, Snap::Unset];
        w.bucket = (pp.inner.phases as u8) * 5; // second part
        let mut c = ClockState {
            step: 3,
            status: NodeStatus::Active,
        };
        worker_clock_delta(pp, &mut w, &mut c);
        assert!(w.additional);
        assert_eq!(w.epoch, 1, "j_f recorded");
        assert_eq!(w.token, Some(Opinion::A));
        assert_eq!(w.age as u32, 0, "restored at the start-of-epoch-0 value");
    }

    #[test]
    fn first_quarter_reading_against_first_part_worker_is_benign() {
        // A trailing clock inside the first quarter is indistinguishable
        // from a fresh epoch; the worker just keeps its recorded progress.
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let mut w = WorkerState::fresh(Some(Opinion::A));
        w.bucket = 5 * 2; // phase 2 beginning
        let before = w;
        let mut c = ClockState {
            step: 1,
            status: NodeStatus::Active,
        };
        worker_clock_delta(pp, &mut w, &mut c);
        assert_eq!(w, before);
        assert_eq!(c.status, NodeStatus::Active);
    }

    #[test]
    fn stale_readings_do_not_drag_a_fresh_worker_forward() {
        // Right after an epoch rollover a worker meets a clock still
        // finishing the previous cycle; the reading is ignored.
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let mut w = WorkerState::fresh(None);
        w.bucket = 0;
        let stale = pp.inner.epoch_len - 3;
        let mut c = ClockState {
            step: stale as u16,
            status: NodeStatus::Active,
        };
        worker_clock_delta(pp, &mut w, &mut c);
        assert_eq!(w.bucket, 0);
    }

    #[test]
    fn worker_cancel_and_double_by_stage() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let canceling = 5 * 1 + Stage::Canceling as u8;
        let mut w1 = WorkerState::fresh(Some(Opinion::A));
        w1.age = 1;
        w1.bucket = canceling;
        let mut w2 = WorkerState::fresh(Some(Opinion::B));
        w2.age = 1;
        w2.bucket = canceling;
        worker_worker_delta(pp, &mut w1, &mut w2);
        assert_eq!(w1.token, None);
        assert_eq!(w2.token, None);

        let doubling = 5 * 1 + Stage::Doubling as u8;
        let mut w1 = WorkerState::fresh(Some(Opinion::A));
        w1.age = 1;
        w1.bucket = doubling;
        let mut w2 = WorkerState::fresh(None);
        w2.bucket = doubling;
        worker_worker_delta(pp, &mut w1, &mut w2);
        assert_eq!(w2.token, Some(Opinion::A));
        assert_eq!((w1.age, w2.age), (2, 2));
        assert!(w1.doubled && w2.doubled);

        // Empty pair: nothing happens.
        let mut e1 = WorkerState::fresh(None);
        let mut e2 = WorkerState::fresh(None);
        let (b1, b2) = (e1, e2);
        worker_worker_delta(pp, &mut e1, &mut e2);
        assert_eq!((e1, e2), (b1, b2));
    }

    #[test]
    fn heavy_split_makes_two_plain_tokens_of_same_age() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let mut w1 = WorkerState::fresh(Some(Opinion::A));
        w1.heavy = true;
        w1.out_of_sync = true;
        let mut w2 = WorkerState::fresh(None);
        let before: i64 = [&w1, &w2]
            .iter()
            .map(|w| p.scaled_value(&Fm2State::Worker(**w)))
            .sum();
        worker_worker_delta(pp, &mut w1, &mut w2);
        assert!(!w1.heavy && !w2.heavy);
        assert!(!w1.out_of_sync && !w2.out_of_sync, "children rejoin the normal flow");
        assert_eq!(w1.token, Some(Opinion::A));
        assert_eq!(w2.token, Some(Opinion::A));
        assert_eq!((w1.age, w2.age), (0, 0));
        let after: i64 = [&w1, &w2]
            .iter()
            .map(|w| p.scaled_value(&Fm2State::Worker(**w)))
            .sum();
        assert_eq!(before, after, "heavy value 2 becomes two value-1 tokens");
    }

    #[test]
    fn workers_two_epochs_apart_fail() {
        let p = proto(1 << 12, (1 << 11) + 1);
        let pp = p.params();
        let mut w1 = WorkerState::fresh(Some(Opinion::A));
        w1.epoch = 0;
        let mut w2 = WorkerState::fresh(Some(Opinion::B));
        w2.epoch = 2;
        worker_worker_delta(pp, &mut w1, &mut w2);
        assert_eq!(w1.status, NodeStatus::Fail);
        assert_eq!(w2.status, NodeStatus::Fail);
    }
}
