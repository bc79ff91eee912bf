//! Canceling-doubling majority protocol with logarithmic phases: at most
//! lambda + 2 phases of C*lambda steps each, every phase tiled into five
//! parts (buffer, canceling, buffer, doubling, buffer), with jump-up
//! synchronization at phase boundaries and done/fail terminator logic.

use crate::engine::{lambda, InputInstance};
use crate::protocol::{
    scaled_token_value, terminator_propagation, token_char, FastProtocol, NodeStatus, Opinion,
    Token, VALUE_SCALE,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("phase part lengths do not fit: C={big_c}, c={small_c} leaves no canceling/doubling stage")]
    PartsDoNotFit { big_c: f64, small_c: f64 },
    #[error("token ages would exceed the fixed-point value scale (lambda={0} too large)")]
    AgeOverflow(u32),
    #[error("phase length {0} exceeds the state encoding bound")]
    PhaseTooLong(u64),
}

/// The five parts of a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Buffer1,
    Canceling,
    Buffer2,
    Doubling,
    Buffer3,
}

impl Part {
    pub fn index(self) -> u32 {
        match self {
            Part::Buffer1 => 0,
            Part::Canceling => 1,
            Part::Buffer2 => 2,
            Part::Doubling => 3,
            Part::Buffer3 => 4,
        }
    }
}

/// Derived phase geometry. `big_c` (C) is the phase-length constant and
/// `small_c` (c) the buffer constant; buffers hold floor(c*lambda) steps,
/// the canceling and doubling stages floor((C-3c)/2*lambda) steps, and the
/// final buffer absorbs the rounding remainder so the five parts tile the
/// phase exactly.
///
/// `slack_kappa` adds a desk-scale variance floor to the consistency check:
/// two nodes in non-adjacent parts fail only when their time counters also
/// differ by more than kappa*sqrt(C*lambda). With kappa = 0 the check is the
/// strict adjacent-parts rule, which assumes proof-scale constants; the
/// default keeps runs of practical sizes from tripping on binomial
/// fluctuations of the interaction counts.
#[derive(Debug, Clone)]
pub struct MajorityParams {
    pub big_c: f64,
    pub small_c: f64,
    pub lambda: u32,
    pub phase_len: u32,
    /// Cumulative part boundaries: ends of buffer1, canceling, buffer2,
    /// doubling. Buffer3 ends at `phase_len`.
    pub bounds: [u32; 4],
    /// First failing phase index: a node entering phase lambda+2 fails.
    pub max_phase: u8,
    pub time_slack: u32,
    pub slack_kappa: f64,
    /// Set when c > C/9, the theory-side constraint; a warning, not an error.
    pub c_ratio_warning: bool,
}

pub const DEFAULT_BIG_C: f64 = 32.0;
pub const DEFAULT_SMALL_C: f64 = 8.0;
pub const DEFAULT_SLACK_KAPPA: f64 = 12.0;

/// A token that failed to double concludes the computation (done) only if
/// the node witnessed at least this many same-phase doubling-stage meetings
/// during the phase; otherwise the node cannot tell exhaustion from having
/// missed its doubling window and fails instead. Counters saturate here, so
/// the factor on the state count is constant.
pub const DONE_EVIDENCE_MIN: u8 = 4;

impl MajorityParams {
    pub fn new(n: usize, big_c: f64, small_c: f64, slack_kappa: f64) -> Result<Self, ParamsError> {
        let lam = lambda(n);
        let phase_len = (big_c * lam as f64).floor() as u64;
        let buffer = (small_c * lam as f64).floor() as u64;
        let stage = (((big_c - 3.0 * small_c) / 2.0) * lam as f64).floor() as u64;
        if stage < 1 || buffer + stage > phase_len {
            return Err(ParamsError::PartsDoNotFit { big_c, small_c });
        }
        let b1 = buffer;
        let b2 = b1 + stage;
        let b3 = b2 + buffer;
        let b4 = b3 + stage;
        if b4 >= phase_len {
            return Err(ParamsError::PartsDoNotFit { big_c, small_c });
        }
        if phase_len > u16::MAX as u64 {
            return Err(ParamsError::PhaseTooLong(phase_len));
        }
        let max_phase = lam + 2;
        if max_phase + 1 > VALUE_SCALE - 4 {
            return Err(ParamsError::AgeOverflow(lam));
        }
        let time_slack = (slack_kappa * (big_c * lam as f64).sqrt()).ceil() as u32;
        Ok(MajorityParams {
            big_c,
            small_c,
            lambda: lam,
            phase_len: phase_len as u32,
            bounds: [b1 as u32, b2 as u32, b3 as u32, b4 as u32],
            max_phase: max_phase as u8,
            time_slack,
            slack_kappa,
            c_ratio_warning: small_c > big_c / 9.0,
        })
    }

    pub fn defaults(n: usize) -> Self {
        MajorityParams::new(n, DEFAULT_BIG_C, DEFAULT_SMALL_C, DEFAULT_SLACK_KAPPA)
            .expect("default constants always tile")
    }

    /// Part of a phase the given step falls in.
    pub fn part_of(&self, step: u32) -> Part {
        debug_assert!(step < self.phase_len);
        if step < self.bounds[0] {
            Part::Buffer1
        } else if step < self.bounds[1] {
            Part::Canceling
        } else if step < self.bounds[2] {
            Part::Buffer2
        } else if step < self.bounds[3] {
            Part::Doubling
        } else {
            Part::Buffer3
        }
    }
}

/// Per-node state: token slot, phase and step counters, and status flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MajorityState {
    pub token: Token,
    pub phase: u8,
    pub step: u16,
    pub doubled: bool,
    /// Same-phase doubling-stage meetings witnessed this phase, saturating
    /// at `DONE_EVIDENCE_MIN`.
    pub stage_meets: u8,
    pub status: NodeStatus,
}

impl MajorityState {
    pub fn initial(op: Opinion) -> MajorityState {
        MajorityState {
            token: Some(op),
            phase: 0,
            step: 0,
            doubled: false,
            stage_meets: 0,
            status: NodeStatus::Active,
        }
    }

    /// Combined interaction counter (phase, step).
    #[inline]
    pub fn time(&self, p: &MajorityParams) -> u32 {
        self.phase as u32 * p.phase_len + self.step as u32
    }

    /// Age of the held token: phase if not doubled, phase + 1 if doubled.
    #[inline]
    pub fn age(&self) -> u32 {
        self.phase as u32 + self.doubled as u32
    }

    /// Phase-and-part coordinate used by the adjacency check, with
    /// wraparound into the next phase's buffer1.
    #[inline]
    fn part_coord(&self, p: &MajorityParams) -> u32 {
        self.phase as u32 * 5 + p.part_of(self.step as u32).index()
    }
}

/// Advance a node across one phase boundary (natural rollover or jump-up).
/// A token that failed to double in the finished phase turns its node into
/// a done terminator when the failure is evidenced by enough doubling-stage
/// meetings, and a fail terminator otherwise; entering phase lambda+2
/// fails.
#[inline]
fn advance_phase(p: &MajorityParams, s: &mut MajorityState) {
    if let Some(tok) = s.token {
        if !s.doubled {
            s.status = if s.stage_meets >= DONE_EVIDENCE_MIN {
                NodeStatus::Done(tok)
            } else {
                NodeStatus::Fail
            };
            return;
        }
    }
    s.doubled = false;
    s.step = 0;
    s.stage_meets = 0;
    s.phase += 1;
    if s.phase >= p.max_phase {
        s.status = NodeStatus::Fail;
    }
}

/// Post-interaction step bookkeeping for one node.
#[inline]
fn tick(p: &MajorityParams, s: &mut MajorityState) {
    s.step += 1;
    if s.step as u32 == p.phase_len {
        advance_phase(p, s);
    }
}

/// The transition function for two active (neither done nor fail) nodes.
/// Priority order: consistency, jump-up, cancel, double, no token change;
/// afterwards both surviving nodes advance their step counters (a jumped
/// node ends the interaction at step 0 of its new phase).
pub fn majority_delta(p: &MajorityParams, s1: &mut MajorityState, s2: &mut MajorityState) {
    debug_assert!(s1.status == NodeStatus::Active && s2.status == NodeStatus::Active);

    let c1 = s1.part_coord(p);
    let c2 = s2.part_coord(p);
    if c1.abs_diff(c2) > 1 {
        let gap = s1.time(p).abs_diff(s2.time(p));
        if gap > p.time_slack {
            s1.status = NodeStatus::Fail;
            s2.status = NodeStatus::Fail;
        } else {
            // Tolerated desync: no rule fires across non-adjacent parts.
            tick(p, s1);
            tick(p, s2);
        }
        return;
    }

    if s1.phase != s2.phase {
        // Adjacent parts across a phase boundary (final buffer meeting the
        // next phase's first buffer): the node in the lower phase jumps up
        // to the beginning of the next phase, settling its
        // failed-to-double obligation on the way.
        let (lo, hi) = if s1.phase < s2.phase {
            (&mut *s1, &mut *s2)
        } else {
            (&mut *s2, &mut *s1)
        };
        advance_phase(p, lo);
        tick(p, hi);
        return;
    }

    let part1 = p.part_of(s1.step as u32);
    let part2 = p.part_of(s2.step as u32);
    // Doubling runs from the doubling stage through the final buffer: the
    // stages only need to keep canceling and doubling separated, and the
    // wider window lets slightly trailing tokens still find their split
    // before the phase ends.
    let doubling_window = |part: Part| matches!(part, Part::Doubling | Part::Buffer3);
    if part1 == Part::Canceling && part2 == Part::Canceling {
        if let (Some(t1), Some(t2)) = (s1.token, s2.token) {
            if t1 != t2 {
                s1.token = None;
                s2.token = None;
            }
        }
    } else if doubling_window(part1) && doubling_window(part2) {
        s1.stage_meets = (s1.stage_meets + 1).min(DONE_EVIDENCE_MIN);
        s2.stage_meets = (s2.stage_meets + 1).min(DONE_EVIDENCE_MIN);
        let split = |from: &mut MajorityState, to: &mut MajorityState| {
            let tok = from.token;
            from.doubled = true;
            to.token = tok;
            to.doubled = true;
        };
        if s1.token.is_some() && !s1.doubled && s2.token.is_none() {
            split(s1, s2);
        } else if s2.token.is_some() && !s2.doubled && s1.token.is_none() {
            split(s2, s1);
        }
    }

    tick(p, s1);
    tick(p, s2);
}

/// The majority protocol packaged for the extended composition.
pub struct Majority {
    instance: InputInstance,
    params: MajorityParams,
}

impl Majority {
    pub fn new(instance: InputInstance, params: MajorityParams) -> Majority {
        Majority { instance, params }
    }

    pub fn with_defaults(instance: InputInstance) -> Majority {
        let params = MajorityParams::defaults(instance.n());
        Majority { instance, params }
    }

    pub fn params(&self) -> &MajorityParams {
        &self.params
    }
}

fn flags_string(doubled: bool, oos: bool, additional: bool, status: NodeStatus) -> String {
    let mut f = String::new();
    if doubled {
        f.push('d');
    }
    if oos {
        f.push('o');
    }
    if additional {
        f.push('x');
    }
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

fn token_bits(token: Token) -> u64 {
    match token {
        None => 0,
        Some(Opinion::A) => 1,
        Some(Opinion::B) => 2,
    }
}

impl FastProtocol for Majority {
    type State = MajorityState;

    fn name(&self) -> &'static str {
        "majority"
    }

    fn instance(&self) -> &InputInstance {
        &self.instance
    }

    fn initial_state(&self, node: usize) -> MajorityState {
        MajorityState::initial(if node < self.instance.a0() {
            Opinion::A
        } else {
            Opinion::B
        })
    }

    fn apply(&self, a: &mut MajorityState, b: &mut MajorityState) {
        if let Some((na, nb)) = terminator_propagation(a.status, b.status) {
            a.status = na;
            b.status = nb;
            return;
        }
        majority_delta(&self.params, a, b);
    }

    fn status(&self, s: &MajorityState) -> NodeStatus {
        s.status
    }

    fn token_opinion(&self, s: &MajorityState) -> Option<Opinion> {
        s.token
    }

    fn scaled_value(&self, s: &MajorityState) -> i64 {
        match s.token {
            Some(op) => scaled_token_value(op, s.age()),
            None => 0,
        }
    }

    fn ends_conservation(&self, s: &MajorityState) -> bool {
        s.status == NodeStatus::Fail
    }

    fn out_of_sync(&self, _: &MajorityState) -> bool {
        false
    }

    fn additional_epoch(&self, _: &MajorityState) -> bool {
        false
    }

    fn epoch(&self, _: &MajorityState) -> Option<u8> {
        None
    }

    fn encode(&self, s: &MajorityState) -> String {
        let mut flags = String::new();
        if s.doubled {
            flags.push('d');
        }
        if s.stage_meets > 0 {
            flags.push('e');
            flags.push_str(&s.stage_meets.to_string());
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
        format!(
            "M:{}:{}:{}:{}",
            token_char(s.token),
            s.phase,
            s.step,
            flags
        )
    }

    fn state_key(&self, s: &MajorityState) -> u64 {
        token_bits(s.token)
            | (s.phase as u64) << 2
            | (s.step as u64) << 8
            | (s.doubled as u64) << 24
            | status_bits(s.status) << 25
            | (s.stage_meets as u64) << 27
    }

    fn classify(&self, s: &MajorityState) -> (String, Option<(u32, u32)>) {
        let class = format!(
            "{}:{}:{}",
            token_char(s.token),
            s.age(),
            flags_string(s.doubled, false, false, s.status)
        );
        // Bucket phases by eighths of a phase for the step histogram.
        let bucket = s.step as u32 / (self.params.phase_len / 8).max(1);
        (class, Some((s.phase as u32, bucket)))
    }
}
