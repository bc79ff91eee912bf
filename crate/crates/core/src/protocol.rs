//! Protocol abstraction, the 4-state always-correct backup, the epidemic
//! broadcast primitive, and the fast+slow extended composition.
//!
//! A protocol owns its instance (population size and initial split) and
//! exposes a symmetric transition function over ordered `(initiator,
//! responder)` pairs. All protocols except the FastMajority2 initialization
//! rule must be invariant under swapping the pair order; the symmetry audit
//! tests enforce this.

use serde::{Deserialize, Serialize};

/// One of the two opinions being voted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opinion {
    A,
    B,
}

impl Opinion {
    pub fn other(self) -> Opinion {
        match self {
            Opinion::A => Opinion::B,
            Opinion::B => Opinion::A,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Opinion::A => 'A',
            Opinion::B => 'B',
        }
    }
}

/// A token slot: a strong opinion of some age, or empty.
pub type Token = Option<Opinion>;

pub fn token_char(t: Token) -> char {
    match t {
        Some(op) => op.as_char(),
        None => '-',
    }
}

/// Terminal classification of a node state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Active,
    Done(Opinion),
    Fail,
}

/// Fixed-point scale for exact token values: a token of age `g` carries the
/// integer value `2^(VALUE_SCALE - g)`. Ages are bounded well below the
/// scale by parameter validation, so sums over the population fit in `i128`
/// with no rounding anywhere.
pub const VALUE_SCALE: u32 = 48;

/// Signed scaled value of a token of the given age (A positive, B negative).
#[inline]
pub fn scaled_token_value(op: Opinion, age: u32) -> i64 {
    debug_assert!(age <= VALUE_SCALE);
    let v = 1i64 << (VALUE_SCALE - age);
    match op {
        Opinion::A => v,
        Opinion::B => -v,
    }
}

/// Largest epoch index tracked by the running census.
pub const MAX_EPOCH_TRACK: usize = 64;

/// Per-state facts the engine needs to maintain its running census.
#[derive(Debug, Clone, Copy)]
pub struct StateFacts {
    /// Output of the total output map (for composite protocols this already
    /// routes through done/fail/backup).
    pub output: Opinion,
    /// Output of the backup component, when the protocol carries one.
    pub backup_output: Option<Opinion>,
    /// +1 for a strong backup A, -1 for a strong backup B, 0 otherwise.
    pub backup_strong: i8,
    /// Signed scaled token value carried by this state (0 if empty).
    pub scaled_value: i64,
    /// True once this state ends the conservation scope (fail, or a state
    /// that restored a token from a snapshot).
    pub ends_conservation: bool,
    pub status: NodeStatus,
    pub out_of_sync: bool,
    pub additional_epoch: bool,
    pub epoch: Option<u8>,
}

impl StateFacts {
    pub fn plain(output: Opinion) -> StateFacts {
        StateFacts {
            output,
            backup_output: None,
            backup_strong: 0,
            scaled_value: 0,
            ends_conservation: false,
            status: NodeStatus::Active,
            out_of_sync: false,
            additional_epoch: false,
            epoch: None,
        }
    }
}

/// Aggregate counts over a configuration, maintained incrementally by the
/// engine: remove the two old states, apply the transition, add the two new
/// ones. Everything the stability predicates and monitors need per
/// interaction is O(1) here.
#[derive(Debug, Clone)]
pub struct Census {
    pub population: u32,
    pub out_a: u32,
    pub out_b: u32,
    pub backup_a: u32,
    pub backup_b: u32,
    pub done_a: u32,
    pub done_b: u32,
    pub fail: u32,
    pub out_of_sync: u32,
    pub additional_epoch: u32,
    pub scope_enders: u32,
    pub value_sum: i128,
    pub backup_strong_diff: i64,
    pub by_epoch: [u32; MAX_EPOCH_TRACK],
}

impl Census {
    pub fn new() -> Census {
        Census {
            population: 0,
            out_a: 0,
            out_b: 0,
            backup_a: 0,
            backup_b: 0,
            done_a: 0,
            done_b: 0,
            fail: 0,
            out_of_sync: 0,
            additional_epoch: 0,
            scope_enders: 0,
            value_sum: 0,
            backup_strong_diff: 0,
            by_epoch: [0; MAX_EPOCH_TRACK],
        }
    }

    #[inline]
    pub fn add(&mut self, f: &StateFacts) {
        self.population += 1;
        match f.output {
            Opinion::A => self.out_a += 1,
            Opinion::B => self.out_b += 1,
        }
        match f.backup_output {
            Some(Opinion::A) => self.backup_a += 1,
            Some(Opinion::B) => self.backup_b += 1,
            None => {}
        }
        match f.status {
            NodeStatus::Done(Opinion::A) => self.done_a += 1,
            NodeStatus::Done(Opinion::B) => self.done_b += 1,
            NodeStatus::Fail => self.fail += 1,
            NodeStatus::Active => {}
        }
        self.out_of_sync += f.out_of_sync as u32;
        self.additional_epoch += f.additional_epoch as u32;
        self.scope_enders += f.ends_conservation as u32;
        self.value_sum += f.scaled_value as i128;
        self.backup_strong_diff += f.backup_strong as i64;
        if let Some(e) = f.epoch {
            self.by_epoch[e as usize & (MAX_EPOCH_TRACK - 1)] += 1;
        }
    }

    #[inline]
    pub fn remove(&mut self, f: &StateFacts) {
        self.population -= 1;
        match f.output {
            Opinion::A => self.out_a -= 1,
            Opinion::B => self.out_b -= 1,
        }
        match f.backup_output {
            Some(Opinion::A) => self.backup_a -= 1,
            Some(Opinion::B) => self.backup_b -= 1,
            None => {}
        }
        match f.status {
            NodeStatus::Done(Opinion::A) => self.done_a -= 1,
            NodeStatus::Done(Opinion::B) => self.done_b -= 1,
            NodeStatus::Fail => self.fail -= 1,
            NodeStatus::Active => {}
        }
        self.out_of_sync -= f.out_of_sync as u32;
        self.additional_epoch -= f.additional_epoch as u32;
        self.scope_enders -= f.ends_conservation as u32;
        self.value_sum -= f.scaled_value as i128;
        self.backup_strong_diff -= f.backup_strong as i64;
        if let Some(e) = f.epoch {
            self.by_epoch[e as usize & (MAX_EPOCH_TRACK - 1)] -= 1;
        }
    }

    #[inline]
    pub fn output_count(&self, op: Opinion) -> u32 {
        match op {
            Opinion::A => self.out_a,
            Opinion::B => self.out_b,
        }
    }

    #[inline]
    pub fn done_total(&self) -> u32 {
        self.done_a + self.done_b
    }

    /// All backup outputs agree.
    #[inline]
    pub fn backup_unanimous(&self) -> bool {
        self.backup_a == self.population || self.backup_b == self.population
    }
}

impl Default for Census {
    fn default() -> Census {
        Census::new()
    }
}

/// A population protocol, packaged with its input instance.
///
/// `apply` receives an ordered `(initiator, responder)` pair; the engine
/// draws the unordered pair uniformly and the order uniformly among the two.
pub trait Protocol: Sync {
    type State: Copy + Send + Sync + 'static;

    fn name(&self) -> &'static str;
    fn population(&self) -> usize;
    /// The true majority opinion, when the protocol has a voting instance.
    fn true_majority(&self) -> Option<Opinion>;
    /// Target for the exact conservation monitor, scaled by `VALUE_SCALE`.
    fn conservation_target(&self) -> Option<i128>;
    fn initial_config(&self) -> Vec<Self::State>;
    fn apply(&self, initiator: &mut Self::State, responder: &mut Self::State);
    fn facts(&self, s: &Self::State) -> StateFacts;
    fn is_stable(&self, census: &Census) -> bool;
    /// Canonical textual encoding used by traces and census output.
    fn encode(&self, s: &Self::State) -> String;
    /// Compact exact encoding used by the distinct-state audit.
    fn state_key(&self, s: &Self::State) -> u64;
    /// Class label plus optional (epoch, epoch-step bucket) for snapshots.
    fn classify(&self, s: &Self::State) -> (String, Option<(u32, u32)>);
}

// ---------------------------------------------------------------------------
// Four-state backup protocol
// ---------------------------------------------------------------------------

/// State of the 4-state protocol: strong or weak version of each opinion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FourState {
    StrongA,
    StrongB,
    WeakA,
    WeakB,
}

impl FourState {
    pub fn as_char(self) -> char {
        match self {
            FourState::StrongA => 'A',
            FourState::StrongB => 'B',
            FourState::WeakA => 'a',
            FourState::WeakB => 'b',
        }
    }

    pub fn from_char(c: char) -> Option<FourState> {
        match c {
            'A' => Some(FourState::StrongA),
            'B' => Some(FourState::StrongB),
            'a' => Some(FourState::WeakA),
            'b' => Some(FourState::WeakB),
            _ => None,
        }
    }

    #[inline]
    pub fn output(self) -> Opinion {
        match self {
            FourState::StrongA | FourState::WeakA => Opinion::A,
            FourState::StrongB | FourState::WeakB => Opinion::B,
        }
    }

    #[inline]
    pub fn strong_sign(self) -> i8 {
        match self {
            FourState::StrongA => 1,
            FourState::StrongB => -1,
            _ => 0,
        }
    }

    pub const ALL: [FourState; 4] = [
        FourState::StrongA,
        FourState::StrongB,
        FourState::WeakA,
        FourState::WeakB,
    ];
}

/// Transition function of the 4-state protocol. Opposite strong opinions
/// cancel into weak versions of each node's former opinion; a surviving
/// strong opinion converts the opposite weak opinion.
#[inline]
pub fn four_state_delta(p: FourState, q: FourState) -> (FourState, FourState) {
    use FourState::*;
    match (p, q) {
        (StrongA, StrongB) => (WeakA, WeakB),
        (StrongB, StrongA) => (WeakB, WeakA),
        (StrongA, WeakB) => (StrongA, WeakA),
        (WeakB, StrongA) => (WeakA, StrongA),
        (StrongB, WeakA) => (StrongB, WeakB),
        (WeakA, StrongB) => (WeakB, StrongB),
        other => other,
    }
}

/// Stability predicate of the 4-state protocol: all outputs agree.
///
/// Vacuously true on the unreachable all-weak mixed configurations such as
/// `{a,b}`; from any valid input the strong-token difference keeps at least
/// one strong token alive, so those configurations never occur.
pub fn four_state_stable(states: &[FourState]) -> bool {
    let mut a = 0usize;
    for s in states {
        a += (s.output() == Opinion::A) as usize;
    }
    a == 0 || a == states.len()
}

/// The 4-state protocol packaged for the engine.
pub struct FourStateProtocol {
    instance: crate::engine::InputInstance,
}

impl FourStateProtocol {
    pub fn new(instance: crate::engine::InputInstance) -> FourStateProtocol {
        FourStateProtocol { instance }
    }

    pub fn instance(&self) -> &crate::engine::InputInstance {
        &self.instance
    }
}

impl Protocol for FourStateProtocol {
    type State = FourState;

    fn name(&self) -> &'static str {
        "fourstate"
    }

    fn population(&self) -> usize {
        self.instance.n()
    }

    fn true_majority(&self) -> Option<Opinion> {
        Some(self.instance.majority())
    }

    fn conservation_target(&self) -> Option<i128> {
        Some((self.instance.signed_imbalance() as i128) << VALUE_SCALE)
    }

    fn initial_config(&self) -> Vec<FourState> {
        let mut v = Vec::with_capacity(self.instance.n());
        for node in 0..self.instance.n() {
            v.push(if node < self.instance.a0() {
                FourState::StrongA
            } else {
                FourState::StrongB
            });
        }
        v
    }

    fn apply(&self, a: &mut FourState, b: &mut FourState) {
        let (na, nb) = four_state_delta(*a, *b);
        *a = na;
        *b = nb;
    }

    fn facts(&self, s: &FourState) -> StateFacts {
        let mut f = StateFacts::plain(s.output());
        f.scaled_value = match s {
            FourState::StrongA => scaled_token_value(Opinion::A, 0),
            FourState::StrongB => scaled_token_value(Opinion::B, 0),
            _ => 0,
        };
        f.backup_strong = s.strong_sign();
        f
    }

    fn is_stable(&self, census: &Census) -> bool {
        census.out_a == census.population || census.out_b == census.population
    }

    fn encode(&self, s: &FourState) -> String {
        s.as_char().to_string()
    }

    fn state_key(&self, s: &FourState) -> u64 {
        *s as u64
    }

    fn classify(&self, s: &FourState) -> (String, Option<(u32, u32)>) {
        (s.as_char().to_string(), None)
    }
}

// ---------------------------------------------------------------------------
// Epidemic broadcast
// ---------------------------------------------------------------------------

/// Broadcast transition: if either node is informed, both end up informed.
#[inline]
pub fn broadcast_delta(p: bool, q: bool) -> (bool, bool) {
    let inf = p | q;
    (inf, inf)
}

/// Single-source epidemic broadcast, used as a benchmark protocol.
pub struct BroadcastProtocol {
    n: usize,
    sources: usize,
}

impl BroadcastProtocol {
    pub fn new(n: usize, sources: usize) -> BroadcastProtocol {
        assert!(n >= 2 && sources >= 1 && sources <= n);
        BroadcastProtocol { n, sources }
    }
}

impl Protocol for BroadcastProtocol {
    type State = bool;

    fn name(&self) -> &'static str {
        "broadcast"
    }

    fn population(&self) -> usize {
        self.n
    }

    fn true_majority(&self) -> Option<Opinion> {
        None
    }

    fn conservation_target(&self) -> Option<i128> {
        None
    }

    fn initial_config(&self) -> Vec<bool> {
        let mut v = vec![false; self.n];
        for s in v.iter_mut().take(self.sources) {
            *s = true;
        }
        v
    }

    fn apply(&self, a: &mut bool, b: &mut bool) {
        let (na, nb) = broadcast_delta(*a, *b);
        *a = na;
        *b = nb;
    }

    fn facts(&self, s: &bool) -> StateFacts {
        StateFacts::plain(if *s { Opinion::A } else { Opinion::B })
    }

    fn is_stable(&self, census: &Census) -> bool {
        census.out_a == census.population
    }

    fn encode(&self, s: &bool) -> String {
        (if *s { "I" } else { "U" }).to_string()
    }

    fn state_key(&self, s: &bool) -> u64 {
        *s as u64
    }

    fn classify(&self, s: &bool) -> (String, Option<(u32, u32)>) {
        ((if *s { "informed" } else { "uninformed" }).to_string(), None)
    }
}

// ---------------------------------------------------------------------------
// Fast protocol interface and extended composition
// ---------------------------------------------------------------------------

/// Interface a fast (w.l.p.-failing) protocol exposes to the extended
/// composition.
pub trait FastProtocol: Sync {
    type State: Copy + Send + Sync + 'static;

    fn name(&self) -> &'static str;
    fn instance(&self) -> &crate::engine::InputInstance;
    fn initial_state(&self, node: usize) -> Self::State;
    fn apply(&self, initiator: &mut Self::State, responder: &mut Self::State);
    fn status(&self, s: &Self::State) -> NodeStatus;
    /// Opinion of the token carried by this state, if any.
    fn token_opinion(&self, s: &Self::State) -> Option<Opinion>;
    fn scaled_value(&self, s: &Self::State) -> i64;
    fn ends_conservation(&self, s: &Self::State) -> bool;
    fn out_of_sync(&self, s: &Self::State) -> bool;
    fn additional_epoch(&self, s: &Self::State) -> bool;
    fn epoch(&self, s: &Self::State) -> Option<u8>;
    fn encode(&self, s: &Self::State) -> String;
    fn state_key(&self, s: &Self::State) -> u64;
    fn classify(&self, s: &Self::State) -> (String, Option<(u32, u32)>);
}

/// Product state of the extended composition: fast component plus the
/// 4-state backup, which evolves exactly as a standalone 4-state run on the
/// same interaction sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtState<S> {
    pub fast: S,
    pub backup: FourState,
}

/// Extended protocol: fast component composed with the always-correct slow
/// backup. Nodes in the fail state adopt the outcome of the slow protocol;
/// the output map is total because token-less states also route to the
/// backup output.
pub struct Extended<F: FastProtocol> {
    fast: F,
}

impl<F: FastProtocol> Extended<F> {
    pub fn new(fast: F) -> Extended<F> {
        Extended { fast }
    }

    pub fn fast(&self) -> &F {
        &self.fast
    }
}

impl<F: FastProtocol> Protocol for Extended<F> {
    type State = ExtState<F::State>;

    fn name(&self) -> &'static str {
        self.fast.name()
    }

    fn population(&self) -> usize {
        self.fast.instance().n()
    }

    fn true_majority(&self) -> Option<Opinion> {
        Some(self.fast.instance().majority())
    }

    fn conservation_target(&self) -> Option<i128> {
        Some((self.fast.instance().signed_imbalance() as i128) << VALUE_SCALE)
    }

    fn initial_config(&self) -> Vec<ExtState<F::State>> {
        let inst = self.fast.instance();
        (0..inst.n())
            .map(|node| ExtState {
                fast: self.fast.initial_state(node),
                backup: if node < inst.a0() {
                    FourState::StrongA
                } else {
                    FourState::StrongB
                },
            })
            .collect()
    }

    fn apply(&self, a: &mut ExtState<F::State>, b: &mut ExtState<F::State>) {
        self.fast.apply(&mut a.fast, &mut b.fast);
        let (nb_a, nb_b) = four_state_delta(a.backup, b.backup);
        a.backup = nb_a;
        b.backup = nb_b;
    }

    fn facts(&self, s: &ExtState<F::State>) -> StateFacts {
        let status = self.fast.status(&s.fast);
        let backup_out = s.backup.output();
        let output = match status {
            NodeStatus::Done(op) => op,
            NodeStatus::Fail => backup_out,
            NodeStatus::Active => self.fast.token_opinion(&s.fast).unwrap_or(backup_out),
        };
        StateFacts {
            output,
            backup_output: Some(backup_out),
            backup_strong: s.backup.strong_sign(),
            scaled_value: self.fast.scaled_value(&s.fast),
            ends_conservation: self.fast.ends_conservation(&s.fast),
            status,
            out_of_sync: self.fast.out_of_sync(&s.fast),
            additional_epoch: self.fast.additional_epoch(&s.fast),
            epoch: self.fast.epoch(&s.fast),
        }
    }

    fn is_stable(&self, census: &Census) -> bool {
        census.done_a == census.population
            || census.done_b == census.population
            || (census.fail == census.population && census.backup_unanimous())
    }

    fn encode(&self, s: &ExtState<F::State>) -> String {
        let mut e = self.fast.encode(&s.fast);
        e.push('+');
        e.push(s.backup.as_char());
        e
    }

    fn state_key(&self, s: &ExtState<F::State>) -> u64 {
        (self.fast.state_key(&s.fast) << 2) | (s.backup as u64)
    }

    fn classify(&self, s: &ExtState<F::State>) -> (String, Option<(u32, u32)>) {
        self.fast.classify(&s.fast)
    }
}

/// Done/fail propagation shared by the fast protocols: fail absorbs
/// everything; done states of opposite opinions collide into fail; a done
/// node converts an active partner.
///
/// Returns `None` when neither side is done or fail (the caller runs the
/// protocol transition instead). The two returned statuses are the nodes'
/// post-interaction statuses in order.
#[inline]
pub fn terminator_propagation(
    a: NodeStatus,
    b: NodeStatus,
) -> Option<(NodeStatus, NodeStatus)> {
    use NodeStatus::*;
    match (a, b) {
        (Active, Active) => None,
        (Fail, _) | (_, Fail) => Some((Fail, Fail)),
        (Done(x), Done(y)) => {
            if x == y {
                Some((Done(x), Done(y)))
            } else {
                Some((Fail, Fail))
            }
        }
        (Done(x), Active) => Some((Done(x), Done(x))),
        (Active, Done(y)) => Some((Done(y), Done(y))),
    }
}
