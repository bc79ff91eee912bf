//! Epoch-based canceling-doubling protocol with sub-logarithmic phases.
//!
//! Each epoch holds 2*C*lambda steps: the first half is split into P
//! near-equal canceling-doubling phases (P = ceil(lambda^(1/3))), the second
//! half gives out-of-sync tokens time to cascade-split to the age required
//! at the epoch's end. Nodes synchronize only at epoch boundaries, by
//! jump-up. A node whose token cannot reach age P by its epoch rollover
//! restores a snapshot token and triggers the additional epoch: up to 3P
//! logarithmic-length phases with full buffer structure, run with the
//! logarithmic-phase protocol's semantics.

use crate::engine::{lambda, InputInstance};
use crate::protocol::{
    scaled_token_value, terminator_propagation, token_char, FastProtocol, NodeStatus, Opinion,
    Token, VALUE_SCALE,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("epoch length {0} exceeds the state encoding bound")]
    EpochTooLong(u64),
    #[error("token ages would exceed the fixed-point value scale")]
    AgeOverflow,
    #[error("additional-epoch phase parts do not fit for C={0}")]
    AdditionalPartsDoNotFit(f64),
}

pub const DEFAULT_BIG_C: f64 = 32.0;
pub const DEFAULT_SLACK_KAPPA: f64 = 12.0;

/// Snapshot of a node's token at the start of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Snap {
    Unset,
    Empty,
    TokA,
    TokB,
    HeavyA,
    HeavyB,
}

impl Snap {
    pub fn of(token: Token, heavy: bool) -> Snap {
        match (token, heavy) {
            (None, _) => Snap::Empty,
            (Some(Opinion::A), false) => Snap::TokA,
            (Some(Opinion::B), false) => Snap::TokB,
            (Some(Opinion::A), true) => Snap::HeavyA,
            (Some(Opinion::B), true) => Snap::HeavyB,
        }
    }

    pub fn token(self) -> Option<(Token, bool)> {
        match self {
            Snap::Unset => None,
            Snap::Empty => Some((None, false)),
            Snap::TokA => Some((Some(Opinion::A), false)),
            Snap::TokB => Some((Some(Opinion::B), false)),
            Snap::HeavyA => Some((Some(Opinion::A), true)),
            Snap::HeavyB => Some((Some(Opinion::B), true)),
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Snap::Unset => '_',
            Snap::Empty => '-',
            Snap::TokA => 'A',
            Snap::TokB => 'B',
            Snap::HeavyA => 'a',
            Snap::HeavyB => 'b',
        }
    }
}

/// Epoch and phase geometry shared by FastMajority1 and FastMajority2.
///
/// The first epoch part is exactly floor(C*lambda) steps, partitioned into
/// P phases of near-equal length (the boundaries are floor(i*len/P)), so an
/// epoch is 2*C*lambda steps. Each phase splits evenly into its canceling
/// stage (first half) and doubling stage (second half).
#[derive(Debug, Clone)]
pub struct Fm1Params {
    pub big_c: f64,
    /// Analysis-threshold constant, c = C^(3/4) unless overridden. Used by
    /// the invariant monitors, not by the transition function.
    pub small_c: f64,
    pub lambda: u32,
    /// P: phases per epoch.
    pub phases: u32,
    pub first_part_len: u32,
    pub epoch_len: u32,
    /// P+1 cumulative phase boundaries within the first part.
    pub phase_bounds: Vec<u32>,
    /// Nodes reaching this epoch fail.
    pub e_max: u8,
    /// Consistency tolerance on time counters. The strict rule is
    /// ceil(C*lambda/4); the default adds the same desk-scale variance
    /// floor as the logarithmic-phase protocol, capped below half an epoch
    /// so epoch disambiguation still works.
    pub tau: u32,
    pub tau_strict: u32,
    pub slack_kappa: f64,
    /// Additional epoch: 3P phases of floor(C*lambda) steps with the
    /// five-part buffer tiling (buffer constant C/4).
    pub add_phases: u32,
    pub add_phase_len: u32,
    pub add_bounds: [u32; 4],
    pub add_time_slack: u32,
}

impl Fm1Params {
    pub fn new(n: usize, big_c: f64, small_c: Option<f64>, slack_kappa: f64) -> Result<Self, ParamsError> {
        let lam = lambda(n);
        let phases = cube_root_ceil(lam);
        let first_part_len = (big_c * lam as f64).floor() as u64;
        let epoch_len = 2 * first_part_len;
        if epoch_len > u16::MAX as u64 {
            return Err(ParamsError::EpochTooLong(epoch_len));
        }
        let phase_bounds: Vec<u32> = (0..=phases)
            .map(|i| (first_part_len * i as u64 / phases as u64) as u32)
            .collect();

        let e_max = lam.div_ceil(phases) + 2;
        // Deepest possible age: additional-epoch tokens replay from epoch
        // j_f - 1 over 3P phases.
        let max_age = (e_max as u32 + 1) * phases + 3 * phases;
        if max_age > VALUE_SCALE - 2 {
            return Err(ParamsError::AgeOverflow);
        }

        let tau_strict = (big_c * lam as f64 / 4.0).ceil() as u32;
        let floor = (slack_kappa * (big_c * lam as f64).sqrt()).ceil() as u32;
        let cap = (0.4 * epoch_len as f64).floor() as u32;
        let tau = tau_strict.max(floor.min(cap));

        // Additional-epoch phases reuse the five-part tiling; c = C^(3/4)
        // cannot tile a C*lambda phase (3c > C past C = 81), so the
        // additional epoch uses buffer constant C/4.
        let add_phase_len = first_part_len as u32;
        let c_add = big_c / 4.0;
        let buffer = (c_add * lam as f64).floor() as u32;
        let stage = (((big_c - 3.0 * c_add) / 2.0) * lam as f64).floor() as u32;
        if stage < 1 || buffer == 0 {
            return Err(ParamsError::AdditionalPartsDoNotFit(big_c));
        }
        let add_bounds = [buffer, buffer + stage, 2 * buffer + stage, 2 * buffer + 2 * stage];
        if add_bounds[3] >= add_phase_len {
            return Err(ParamsError::AdditionalPartsDoNotFit(big_c));
        }

        Ok(Fm1Params {
            big_c,
            small_c: small_c.unwrap_or_else(|| big_c.powf(0.75)),
            lambda: lam,
            phases,
            first_part_len: first_part_len as u32,
            epoch_len: epoch_len as u32,
            phase_bounds,
            e_max: e_max as u8,
            tau,
            tau_strict,
            slack_kappa,
            add_phases: 3 * phases,
            add_phase_len,
            add_bounds,
            add_time_slack: (slack_kappa * (big_c * lam as f64).sqrt()).ceil() as u32,
        })
    }

    pub fn defaults(n: usize) -> Self {
        Fm1Params::new(n, DEFAULT_BIG_C, None, DEFAULT_SLACK_KAPPA).expect("defaults fit")
    }

    /// Phase index of a step inside the first epoch part.
    pub fn phase_of(&self, step: u32) -> u32 {
        debug_assert!(step < self.first_part_len);
        let mut guess = (step as u64 * self.phases as u64 / self.first_part_len as u64) as u32;
        while step < self.phase_bounds[guess as usize] {
            guess -= 1;
        }
        while step >= self.phase_bounds[guess as usize + 1] {
            guess += 1;
        }
        guess
    }

    /// True when the step lies in the canceling stage (first half) of its
    /// phase in the first epoch part.
    pub fn in_canceling_stage(&self, step: u32) -> bool {
        let ph = self.phase_of(step) as usize;
        let len = self.phase_bounds[ph + 1] - self.phase_bounds[ph];
        step - self.phase_bounds[ph] < len.div_ceil(2)
    }

    fn add_part_of(&self, step: u32) -> crate::majority::Part {
        use crate::majority::Part;
        if step < self.add_bounds[0] {
            Part::Buffer1
        } else if step < self.add_bounds[1] {
            Part::Canceling
        } else if step < self.add_bounds[2] {
            Part::Buffer2
        } else if step < self.add_bounds[3] {
            Part::Doubling
        } else {
            Part::Buffer3
        }
    }
}

/// Smallest P with P^3 >= lam.
fn cube_root_ceil(lam: u32) -> u32 {
    let mut p = 1u32;
    while p * p * p < lam {
        p += 1;
    }
    p
}

/// Per-node state. In normal mode `age` is the age within the current
/// epoch and `step` the epoch-step counter; in additional-epoch mode
/// `epoch` holds the final-epoch index j_f, `age` the token's global age,
/// `add_phase`/`step` the position within the additional epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fm1State {
    pub token: Token,
    pub heavy: bool,
    pub epoch: u8,
    pub age: u8,
    pub step: u16,
    pub add_phase: u8,
    pub doubled: bool,
    pub out_of_sync: bool,
    pub additional: bool,
    /// Additional-epoch doubling-stage meetings this phase, saturating; a
    /// failed doubling concludes done only with this evidence.
    pub stage_meets: u8,
    pub status: NodeStatus,
    pub snaps: [Snap; 3],
}

impl Fm1State {
    pub fn initial(op: Opinion) -> Fm1State {
        Fm1State {
            token: Some(op),
            heavy: false,
            epoch: 0,
            age: 0,
            step: 0,
            add_phase: 0,
            doubled: false,
            out_of_sync: false,
            additional: false,
            stage_meets: 0,
            status: NodeStatus::Active,
            snaps: [Snap::of(Some(op), false), Snap::Unset, Snap::Unset],
        }
    }

    /// Combined step counter of the whole protocol (normal mode).
    #[inline]
    pub fn time(&self, p: &Fm1Params) -> u32 {
        self.epoch as u32 * p.epoch_len + self.step as u32
    }

    /// Global token age.
    #[inline]
    pub fn global_age(&self, p: &Fm1Params) -> u32 {
        if self.additional {
            self.age as u32
        } else {
            self.epoch as u32 * p.phases + self.age as u32
        }
    }

    #[inline]
    pub fn epoch_part(&self, p: &Fm1Params) -> u8 {
        (self.step as u32 >= p.first_part_len) as u8
    }

    #[inline]
    fn normal(&self) -> bool {
        !self.out_of_sync && !self.additional && self.status == NodeStatus::Active
    }
}

/// Restore a node's token from the snapshot taken at the start of epoch
/// max(j_f - 1, 0) and enter the additional epoch at phase 0. A node whose
/// snapshot window cannot cover the target fails.
pub fn trigger_additional_epoch(p: &Fm1Params, s: &mut Fm1State, j_f: u8) {
    let target = j_f.saturating_sub(1);
    let diff = s.epoch as i32 - target as i32;
    if !(0..=2).contains(&diff) {
        s.status = NodeStatus::Fail;
        return;
    }
    let snap = s.snaps[diff as usize];
    match snap.token() {
        None => {
            s.status = NodeStatus::Fail;
        }
        Some((token, heavy)) => {
            s.token = token;
            s.heavy = heavy;
            s.age = (target as u32 * p.phases) as u8;
            s.epoch = j_f;
            s.add_phase = 0;
            s.step = 0;
            s.doubled = false;
            s.out_of_sync = false;
            s.stage_meets = 0;
            s.additional = true;
        }
    }
}

/// Epoch rollover (natural or by jump-up): a node whose token has not
/// reached age P identifies the final epoch and triggers the additional
/// epoch; everyone else advances with age reset and snapshot rotation.
fn epoch_rollover(p: &Fm1Params, s: &mut Fm1State) {
    if s.token.is_some() && (s.age as u32) < p.phases {
        let j_f = s.epoch;
        trigger_additional_epoch(p, s, j_f);
        return;
    }
    s.epoch += 1;
    if s.epoch >= p.e_max {
        s.status = NodeStatus::Fail;
        return;
    }
    s.age = 0;
    s.step = 0;
    s.doubled = false;
    s.out_of_sync = false;
    s.snaps = [Snap::of(s.token, s.heavy), s.snaps[0], s.snaps[1]];
}

/// Per-node bookkeeping after an interaction in normal mode: advance the
/// epoch-step counter, settle phase rollovers (a normal token that failed
/// to double goes out of sync) and the out-of-sync drop rule.
fn tick_normal(p: &Fm1Params, s: &mut Fm1State) {
    let old = s.step as u32;
    s.step += 1;
    let new = s.step as u32;
    if new == p.epoch_len {
        epoch_rollover(p, s);
        return;
    }
    // Phase rollover at any boundary inside the first part, including the
    // boundary into the second part.
    if old < p.first_part_len && p.phase_bounds.binary_search(&new).is_ok() {
        if s.token.is_some() && !s.out_of_sync {
            if s.doubled {
                s.doubled = false;
            } else {
                s.out_of_sync = true;
            }
        }
    }
    drop_out_of_sync(p, s);
}

#[inline]
fn drop_out_of_sync(p: &Fm1Params, s: &mut Fm1State) {
    if s.out_of_sync && s.step as u32 >= p.first_part_len && s.age as u32 == p.phases {
        s.out_of_sync = false;
    }
}

/// Transition for two nodes in normal mode (neither additional, done nor
/// fail). Priority: consistency, epoch pull-up, cancel, double,
/// out-of-sync split, no token change; afterwards per-node bookkeeping.
fn fm1_normal_delta(p: &Fm1Params, s1: &mut Fm1State, s2: &mut Fm1State) {
    let t1 = s1.time(p);
    let t2 = s2.time(p);
    if t1.abs_diff(t2) > p.tau {
        s1.status = NodeStatus::Fail;
        s2.status = NodeStatus::Fail;
        return;
    }

    if s1.epoch != s2.epoch {
        // Consistent but different epochs: one node is finishing an epoch
        // the other has already left. The lagging node jumps to the
        // beginning of its next epoch (with full rollover bookkeeping)
        // once it is inside the tolerance window of the boundary.
        let (lo, hi) = if s1.epoch < s2.epoch {
            (&mut *s1, &mut *s2)
        } else {
            (&mut *s2, &mut *s1)
        };
        if lo.step as u32 >= p.epoch_len - p.tau {
            epoch_rollover(p, lo);
        } else {
            tick_normal(p, lo);
        }
        tick_normal(p, hi);
        return;
    }

    let in_first_part = |s: &Fm1State| (s.step as u32) < p.first_part_len;

    // Canceling: normal tokens of equal age and opposite type, same phase,
    // both in the canceling stage.
    if s1.normal()
        && s2.normal()
        && in_first_part(s1)
        && in_first_part(s2)
        && p.phase_of(s1.step as u32) == p.phase_of(s2.step as u32)
        && p.in_canceling_stage(s1.step as u32)
        && p.in_canceling_stage(s2.step as u32)
    {
        if let (Some(x), Some(y)) = (s1.token, s2.token) {
            if x != y && s1.age == s2.age {
                s1.token = None;
                s2.token = None;
                tick_normal(p, s1);
                tick_normal(p, s2);
                return;
            }
        }
    }

    // Doubling: one un-doubled normal token plus one empty node, same
    // phase, both in the doubling stage.
    if s1.normal()
        && s2.normal()
        && in_first_part(s1)
        && in_first_part(s2)
        && p.phase_of(s1.step as u32) == p.phase_of(s2.step as u32)
        && !p.in_canceling_stage(s1.step as u32)
        && !p.in_canceling_stage(s2.step as u32)
    {
        let split = |from: &mut Fm1State, to: &mut Fm1State| {
            to.token = from.token;
            let age = from.age + 1;
            from.age = age;
            to.age = age;
            from.doubled = true;
            to.doubled = true;
        };
        if s1.token.is_some() && !s1.doubled && s2.token.is_none() {
            split(s1, s2);
            tick_normal(p, s1);
            tick_normal(p, s2);
            return;
        }
        if s2.token.is_some() && !s2.doubled && s1.token.is_none() {
            split(s2, s1);
            tick_normal(p, s1);
            tick_normal(p, s2);
            return;
        }
    }

    // Out-of-sync cascading split: an out-of-sync token below the target
    // age meets any empty node of the same epoch, in any stage or part.
    {
        let split_oos = |from: &mut Fm1State, to: &mut Fm1State| {
            to.token = from.token;
            let age = from.age + 1;
            from.age = age;
            to.age = age;
            from.out_of_sync = true;
            to.out_of_sync = true;
            to.doubled = false;
        };
        if s1.out_of_sync && (s1.age as u32) < p.phases && s2.token.is_none() && !s2.out_of_sync {
            split_oos(s1, s2);
        } else if s2.out_of_sync && (s2.age as u32) < p.phases && s1.token.is_none() && !s1.out_of_sync
        {
            split_oos(s2, s1);
        }
    }

    tick_normal(p, s1);
    tick_normal(p, s2);
}

/// Additional-epoch transition: logarithmic-length phases with five-part
/// tiling, run with the canceling-doubling semantics of the slow protocol,
/// ages counted globally from the replay base.
fn fm1_additional_delta(p: &Fm1Params, s1: &mut Fm1State, s2: &mut Fm1State) {
    if s1.epoch != s2.epoch {
        // Conflicting final-epoch indices.
        s1.status = NodeStatus::Fail;
        s2.status = NodeStatus::Fail;
        return;
    }

    let coord = |s: &Fm1State| s.add_phase as u32 * 5 + p.add_part_of(s.step as u32).index();
    let time = |s: &Fm1State| s.add_phase as u32 * p.add_phase_len + s.step as u32;
    if coord(s1).abs_diff(coord(s2)) > 1 {
        if time(s1).abs_diff(time(s2)) > p.add_time_slack {
            s1.status = NodeStatus::Fail;
            s2.status = NodeStatus::Fail;
        } else {
            tick_additional(p, s1);
            tick_additional(p, s2);
        }
        return;
    }

    if s1.add_phase != s2.add_phase {
        // Final buffer meeting the next phase's first buffer: jump up.
        let (lo, hi) = if s1.add_phase < s2.add_phase {
            (&mut *s1, &mut *s2)
        } else {
            (&mut *s2, &mut *s1)
        };
        advance_add_phase(p, lo);
        tick_additional(p, hi);
        return;
    }

    use crate::majority::Part;
    let part1 = p.add_part_of(s1.step as u32);
    let part2 = p.add_part_of(s2.step as u32);
    let doubling_window = |part: Part| matches!(part, Part::Doubling | Part::Buffer3);
    if part1 == Part::Canceling && part2 == Part::Canceling {
        if let (Some(x), Some(y)) = (s1.token, s2.token) {
            if x != y && s1.age == s2.age && !s1.heavy && !s2.heavy {
                s1.token = None;
                s2.token = None;
            }
        }
    } else if doubling_window(part1) && doubling_window(part2) {
        s1.stage_meets = (s1.stage_meets + 1).min(crate::majority::DONE_EVIDENCE_MIN);
        s2.stage_meets = (s2.stage_meets + 1).min(crate::majority::DONE_EVIDENCE_MIN);
        let split = |from: &mut Fm1State, to: &mut Fm1State| {
            to.token = from.token;
            let age = from.age + 1;
            from.age = age;
            to.age = age;
            from.doubled = true;
            to.doubled = true;
        };
        if s1.token.is_some() && !s1.doubled && !s1.heavy && s2.token.is_none() {
            split(s1, s2);
        } else if s2.token.is_some() && !s2.doubled && !s2.heavy && s1.token.is_none() {
            split(s2, s1);
        }
    }

    // Heavy restored tokens split into two plain tokens of the same age in
    // any stage, like out-of-sync splits.
    if s1.heavy && s2.token.is_none() {
        s2.token = s1.token;
        s2.age = s1.age;
        s1.heavy = false;
    } else if s2.heavy && s1.token.is_none() {
        s1.token = s2.token;
        s1.age = s2.age;
        s2.heavy = false;
    }

    tick_additional(p, s1);
    tick_additional(p, s2);
}

/// Advance an additional-epoch node one phase. An evidenced failed
/// doubling means done; a token that merely missed its doubling window
/// carries on at its lagging age and keeps splitting in later phases (ages
/// are explicit here, so the value bookkeeping stays exact). Completing
/// all 3P phases without done means fail.
fn advance_add_phase(p: &Fm1Params, s: &mut Fm1State) {
    if let Some(tok) = s.token {
        if !s.doubled && !s.heavy && s.stage_meets >= crate::majority::DONE_EVIDENCE_MIN {
            s.status = NodeStatus::Done(tok);
            return;
        }
    }
    s.doubled = false;
    s.step = 0;
    s.stage_meets = 0;
    s.add_phase += 1;
    if s.add_phase as u32 >= p.add_phases {
        s.status = NodeStatus::Fail;
    }
}

#[inline]
fn tick_additional(p: &Fm1Params, s: &mut Fm1State) {
    s.step += 1;
    if s.step as u32 == p.add_phase_len {
        advance_add_phase(p, s);
    }
}

/// The FastMajority1 protocol packaged for the extended composition.
pub struct FastMajority1 {
    instance: InputInstance,
    params: Fm1Params,
}

impl FastMajority1 {
    pub fn new(instance: InputInstance, params: Fm1Params) -> FastMajority1 {
        FastMajority1 { instance, params }
    }

    pub fn with_defaults(instance: InputInstance) -> FastMajority1 {
        let params = Fm1Params::defaults(instance.n());
        FastMajority1 { instance, params }
    }

    pub fn params(&self) -> &Fm1Params {
        &self.params
    }

    pub fn delta(&self, a: &mut Fm1State, b: &mut Fm1State) {
        if let Some((na, nb)) = terminator_propagation(a.status, b.status) {
            a.status = na;
            b.status = nb;
            return;
        }
        match (a.additional, b.additional) {
            (false, false) => fm1_normal_delta(&self.params, a, b),
            (true, true) => fm1_additional_delta(&self.params, a, b),
            (true, false) => {
                let j_f = a.epoch;
                trigger_additional_epoch(&self.params, b, j_f);
                tick_additional(&self.params, a);
            }
            (false, true) => {
                let j_f = b.epoch;
                trigger_additional_epoch(&self.params, a, j_f);
                tick_additional(&self.params, b);
            }
        }
    }
}

impl FastProtocol for FastMajority1 {
    type State = Fm1State;

    fn name(&self) -> &'static str {
        "fastmajority1"
    }

    fn instance(&self) -> &InputInstance {
        &self.instance
    }

    fn initial_state(&self, node: usize) -> Fm1State {
        Fm1State::initial(if node < self.instance.a0() {
            Opinion::A
        } else {
            Opinion::B
        })
    }

    fn apply(&self, a: &mut Fm1State, b: &mut Fm1State) {
        self.delta(a, b);
    }

    fn status(&self, s: &Fm1State) -> NodeStatus {
        s.status
    }

    fn token_opinion(&self, s: &Fm1State) -> Option<Opinion> {
        s.token
    }

    fn scaled_value(&self, s: &Fm1State) -> i64 {
        match s.token {
            Some(op) => {
                let v = scaled_token_value(op, s.global_age(&self.params));
                if s.heavy {
                    v * 2
                } else {
                    v
                }
            }
            None => 0,
        }
    }

    fn ends_conservation(&self, s: &Fm1State) -> bool {
        s.status == NodeStatus::Fail || s.additional
    }

    fn out_of_sync(&self, s: &Fm1State) -> bool {
        s.out_of_sync
    }

    fn additional_epoch(&self, s: &Fm1State) -> bool {
        s.additional
    }

    fn epoch(&self, s: &Fm1State) -> Option<u8> {
        Some(s.epoch)
    }

    fn encode(&self, s: &Fm1State) -> String {
        let (part, phase) = if s.additional {
            ("a".to_string(), s.add_phase.to_string())
        } else if (s.step as u32) < self.params.first_part_len {
            ("0".to_string(), self.params.phase_of(s.step as u32).to_string())
        } else {
            ("1".to_string(), "-".to_string())
        };
        let mut flags = String::new();
        if s.doubled {
            flags.push('d');
        }
        if s.out_of_sync {
            flags.push('o');
        }
        if s.additional {
            flags.push('x');
        }
        match s.status {
            NodeStatus::Done(Opinion::A) => flags.push_str("DA"),
            NodeStatus::Done(Opinion::B) => flags.push_str("DB"),
            NodeStatus::Fail => flags.push('F'),
            NodeStatus::Active => {}
        }
        if flags.is_empty() {
            flags.push('-');
        }
        let snaps: String = s.snaps.iter().map(|x| x.as_char()).collect();
        format!(
            "F1:{}:{}:{}:{}:{}:{}:{}:{}",
            token_char(s.token),
            s.epoch,
            s.age,
            part,
            phase,
            s.step,
            flags,
            snaps
        )
    }

    fn state_key(&self, s: &Fm1State) -> u64 {
        let tok = match s.token {
            None => 0u64,
            Some(Opinion::A) => 1,
            Some(Opinion::B) => 2,
        };
        let status = match s.status {
            NodeStatus::Active => 0u64,
            NodeStatus::Done(Opinion::A) => 1,
            NodeStatus::Done(Opinion::B) => 2,
            NodeStatus::Fail => 3,
        };
        let snaps = s
            .snaps
            .iter()
            .fold(0u64, |acc, sn| acc * 6 + *sn as u64);
        tok | (s.epoch as u64) << 2
            | (s.age as u64) << 7
            | (s.step as u64) << 13
            | (s.add_phase as u64) << 29
            | (s.doubled as u64) << 34
            | (s.out_of_sync as u64) << 35
            | (s.additional as u64) << 36
            | status << 37
            | snaps << 39
            | (s.heavy as u64) << 47
            | (s.stage_meets as u64) << 48
    }

    fn classify(&self, s: &Fm1State) -> (String, Option<(u32, u32)>) {
        let mut flags = String::new();
        if s.doubled {
            flags.push('d');
        }
        if s.out_of_sync {
            flags.push('o');
        }
        if s.additional {
            flags.push('x');
        }
        match s.status {
            NodeStatus::Done(Opinion::A) => flags.push_str("DA"),
            NodeStatus::Done(Opinion::B) => flags.push_str("DB"),
            NodeStatus::Fail => flags.push('F'),
            NodeStatus::Active => {}
        }
        if flags.is_empty() {
            flags.push('-');
        }
        let class = format!("{}:{}:{}", token_char(s.token), s.global_age(&self.params), flags);
        let bucket = s.step as u32 / (self.params.epoch_len / 8).max(1);
        (class, Some((s.epoch as u32, bucket)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Fm1Params {
        Fm1Params::defaults(1 << 14)
    }

    fn node(token: Token, epoch: u8, age: u8, step: u16) -> Fm1State {
        Fm1State {
            token,
            heavy: false,
            epoch,
            age,
            step,
            add_phase: 0,
            doubled: false,
            out_of_sync: false,
            additional: false,
            stage_meets: 0,
            status: NodeStatus::Active,
            snaps: [Snap::Empty, Snap::Empty, Snap::Empty],
        }
    }

    #[test]
    fn geometry() {
        let p = params();
        // lambda = 14, P = 3, first part = 448, epoch = 896.
        assert_eq!(p.lambda, 14);
        assert_eq!(p.phases, 3);
        assert_eq!(p.first_part_len, 448);
        assert_eq!(p.epoch_len, 896);
        assert_eq!(p.phase_bounds, vec![0, 149, 298, 448]);
        assert_eq!(p.e_max, 7);
        assert_eq!(p.phase_of(0), 0);
        assert_eq!(p.phase_of(148), 0);
        assert_eq!(p.phase_of(149), 1);
        assert_eq!(p.phase_of(447), 2);
        assert!(p.in_canceling_stage(0));
        assert!(p.in_canceling_stage(74));
        assert!(!p.in_canceling_stage(75));
        assert_eq!(cube_root_ceil(1), 1);
        assert_eq!(cube_root_ceil(6), 2);
        assert_eq!(cube_root_ceil(14), 3);
        assert_eq!(cube_root_ceil(27), 3);
        assert_eq!(cube_root_ceil(28), 4);
    }

    #[test]
    fn cancel_same_phase_same_age() {
        let p = params();
        let mut a = node(Some(Opinion::A), 1, 0, 3);
        let mut b = node(Some(Opinion::B), 1, 0, 5);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert_eq!(a.token, None);
        assert_eq!(b.token, None);
        assert_eq!((a.step, b.step), (4, 6));
    }

    #[test]
    fn no_cancel_across_phases() {
        let p = params();
        let mut a = node(Some(Opinion::A), 1, 0, 3);
        let mut b = node(Some(Opinion::B), 1, 1, p.phase_bounds[1] as u16 + 1);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert_eq!(a.token, Some(Opinion::A));
        assert_eq!(b.token, Some(Opinion::B));
    }

    #[test]
    fn inconsistent_times_fail() {
        let p = params();
        let mut a = node(Some(Opinion::A), 0, 0, 0);
        let mut b = node(Some(Opinion::B), 0, 0, (p.tau + 1) as u16);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert_eq!(a.status, NodeStatus::Fail);
        assert_eq!(b.status, NodeStatus::Fail);
    }

    #[test]
    fn out_of_sync_split_any_stage_and_inheritance() {
        let p = params();
        let mut a = node(Some(Opinion::A), 2, 1, 40);
        a.out_of_sync = true;
        let mut b = node(None, 2, 0, 200);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert_eq!(a.token, Some(Opinion::A));
        assert_eq!(b.token, Some(Opinion::A));
        assert_eq!(a.age, 2);
        assert_eq!(b.age, 2);
        assert!(a.out_of_sync && b.out_of_sync);
    }

    #[test]
    fn out_of_sync_never_cancels() {
        let p = params();
        let mut a = node(Some(Opinion::A), 1, 0, 3);
        a.out_of_sync = true;
        let mut b = node(Some(Opinion::B), 1, 0, 3);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert_eq!(a.token, Some(Opinion::A));
        assert_eq!(b.token, Some(Opinion::B));
    }

    #[test]
    fn out_of_sync_drops_at_target_age_in_second_part() {
        let p = params();
        let mut a = node(Some(Opinion::A), 1, p.phases as u8 - 1, p.first_part_len as u16 + 10);
        a.out_of_sync = true;
        let mut b = node(None, 1, 0, p.first_part_len as u16 + 12);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert_eq!(a.age as u32, p.phases);
        assert!(!a.out_of_sync, "reached target age in part 1: flag drops");
        assert!(!b.out_of_sync);
    }

    #[test]
    fn failed_doubling_at_phase_rollover_sets_out_of_sync() {
        let p = params();
        let mut a = node(Some(Opinion::A), 0, 0, p.phase_bounds[1] as u16 - 1);
        let mut b = node(None, 0, 0, p.phase_bounds[2] as u16 + 1);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert!(a.out_of_sync, "token missed its split in phase 0");
        assert_eq!(a.age, 0);
    }

    #[test]
    fn epoch_pull_up_rolls_the_lower_node() {
        let p = params();
        let mut a = node(None, 1, p.phases as u8, (p.epoch_len - 3) as u16);
        a.age = 0;
        a.token = None;
        let mut b = node(None, 2, 0, 5);
        fm1_normal_delta(&p, &mut a, &mut b);
        assert_eq!(a.epoch, 2);
        assert_eq!(a.step, 0);
        assert_eq!(b.step, 6);
    }

    #[test]
    fn epoch_rollover_with_young_token_triggers_additional_epoch() {
        let p = params();
        let mut s = node(Some(Opinion::B), 2, 1, 0);
        s.out_of_sync = true;
        s.snaps = [Snap::TokB, Snap::TokA, Snap::TokA];
        s.step = (p.epoch_len - 1) as u16;
        let mut other = node(None, 2, 0, (p.epoch_len - 5) as u16);
        fm1_normal_delta(&p, &mut s, &mut other);
        assert!(s.additional);
        assert_eq!(s.epoch, 2, "stores j_f");
        // target epoch j_f - 1 = 1, own epoch 2: prev snapshot.
        assert_eq!(s.token, Some(Opinion::A));
        assert_eq!(s.age as u32, 1 * p.phases);
        assert!(!s.out_of_sync);
    }

    #[test]
    fn snapshot_selection_table() {
        let p = params();
        // Node already in epoch j_f + 1 selects the prev-prev snapshot.
        let mut s = node(Some(Opinion::A), 4, 0, 7);
        s.snaps = [Snap::TokA, Snap::Empty, Snap::TokB];
        trigger_additional_epoch(&p, &mut s, 3);
        assert!(s.additional);
        assert_eq!(s.token, Some(Opinion::B));
        assert_eq!(s.age as u32, 2 * p.phases);
        assert_eq!(s.epoch, 3);

        // j_f = 0 restores the original input token from the start of epoch 0.
        let mut s0 = Fm1State::initial(Opinion::B);
        trigger_additional_epoch(&p, &mut s0, 0);
        assert!(s0.additional);
        assert_eq!(s0.token, Some(Opinion::B));
        assert_eq!(s0.age, 0);

        // Missing snapshot fails.
        let mut bad = node(Some(Opinion::A), 4, 0, 7);
        bad.snaps = [Snap::TokA, Snap::TokA, Snap::Unset];
        trigger_additional_epoch(&p, &mut bad, 3);
        assert_eq!(bad.status, NodeStatus::Fail);

        // Node lagging more than one epoch below the target fails.
        let mut lag = node(Some(Opinion::A), 0, 0, 7);
        trigger_additional_epoch(&p, &mut lag, 3);
        assert_eq!(lag.status, NodeStatus::Fail);
    }

    #[test]
    fn additional_epoch_cancel_and_done() {
        let p = params();
        let mk = |tok: Token, age: u8, phase: u8, step: u16| {
            let mut s = node(tok, 3, age, step);
            s.additional = true;
            s.add_phase = phase;
            s
        };
        // Cancel of equal-age opposite tokens in the canceling part.
        let mut a = mk(Some(Opinion::A), 6, 1, p.add_bounds[0] as u16);
        let mut b = mk(Some(Opinion::B), 6, 1, p.add_bounds[0] as u16 + 1);
        fm1_additional_delta(&p, &mut a, &mut b);
        assert_eq!(a.token, None);
        assert_eq!(b.token, None);

        // Unequal ages do not cancel.
        let mut a = mk(Some(Opinion::A), 6, 1, p.add_bounds[0] as u16);
        let mut b = mk(Some(Opinion::B), 7, 1, p.add_bounds[0] as u16);
        fm1_additional_delta(&p, &mut a, &mut b);
        assert!(a.token.is_some() && b.token.is_some());

        // An evidenced token that fails to double goes done at the phase
        // rollover; without evidence the node fails instead.
        let mut a = mk(Some(Opinion::A), 6, 1, (p.add_phase_len - 1) as u16);
        a.stage_meets = crate::majority::DONE_EVIDENCE_MIN;
        let mut b = mk(Some(Opinion::A), 7, 1, (p.add_phase_len - 1) as u16);
        b.doubled = true;
        fm1_additional_delta(&p, &mut a, &mut b);
        assert_eq!(a.status, NodeStatus::Done(Opinion::A));
        assert_eq!(b.status, NodeStatus::Active);
        assert_eq!(b.add_phase, 2);

        let mut a = mk(Some(Opinion::A), 6, 1, (p.add_phase_len - 1) as u16);
        let mut b = mk(Some(Opinion::A), 7, 1, (p.add_phase_len - 1) as u16);
        b.doubled = true;
        fm1_additional_delta(&p, &mut a, &mut b);
        assert_eq!(
            a.status,
            NodeStatus::Active,
            "an unevidenced miss carries on at a lagging age"
        );
        assert_eq!(a.add_phase, 2);
        assert_eq!(a.age, 6, "age lags until a later split");

        // Completing all 3P phases without done fails.
        let mut a = mk(None, 0, (p.add_phases - 1) as u8, (p.add_phase_len - 1) as u16);
        let mut b = mk(None, 0, (p.add_phases - 1) as u8, (p.add_phase_len - 1) as u16);
        fm1_additional_delta(&p, &mut a, &mut b);
        assert_eq!(a.status, NodeStatus::Fail);
        assert_eq!(b.status, NodeStatus::Fail);
    }

    #[test]
    fn additional_epoch_propagates_to_active_nodes() {
        let inst = InputInstance::new(1 << 14, (1 << 13) + 1).unwrap();
        let proto = FastMajority1::with_defaults(inst);
        let p = proto.params();
        let mut ae = node(Some(Opinion::A), 2, 3, 10);
        ae.additional = true;
        ae.age = 3;
        let mut joiner = node(Some(Opinion::B), 2, 2, 400);
        joiner.snaps = [Snap::TokB, Snap::TokB, Snap::Unset];
        proto.delta(&mut ae, &mut joiner);
        assert!(joiner.additional);
        assert_eq!(joiner.epoch, 2);
        assert_eq!(joiner.token, Some(Opinion::B), "restored from prev snapshot");
        assert_eq!(joiner.age as u32, 1 * p.phases);
        assert_eq!(joiner.add_phase, 0);
        assert_eq!(joiner.step, 0);
    }

    #[test]
    fn conflicting_final_epochs_fail() {
        let p = params();
        let mut a = node(None, 2, 0, 0);
        a.additional = true;
        let mut b = node(None, 3, 0, 0);
        b.additional = true;
        fm1_additional_delta(&p, &mut a, &mut b);
        assert_eq!(a.status, NodeStatus::Fail);
        assert_eq!(b.status, NodeStatus::Fail);
    }

    #[test]
    fn reaching_e_max_fails() {
        let p = params();
        let mut s = node(None, p.e_max - 1, 0, (p.epoch_len - 1) as u16);
        let mut other = node(None, p.e_max - 1, 0, (p.epoch_len - 3) as u16);
        fm1_normal_delta(&p, &mut s, &mut other);
        assert_eq!(s.status, NodeStatus::Fail);
    }

    #[test]
    fn value_accounting_for_tokens() {
        let inst = InputInstance::new(1 << 14, (1 << 13) + 1).unwrap();
        let proto = FastMajority1::with_defaults(inst);
        let s = node(Some(Opinion::A), 2, 1, 0);
        let g = 2 * proto.params().phases + 1;
        assert_eq!(proto.scaled_value(&s), 1i64 << (VALUE_SCALE - g));
        let mut h = s;
        h.token = Some(Opinion::B);
        h.heavy = true;
        assert_eq!(proto.scaled_value(&h), -2 * (1i64 << (VALUE_SCALE - g)));
    }
}
