//! The decentralized training protocol.
//!
//! Each round draws `Q` senders and `Q` distinct receivers. Senders run
//! local SGD on their private data, keep the result and send it to their
//! paired receiver, which fuses it with its own model using one of three
//! strategies:
//!
//! * [`FusionStrategy::DefKt`]: the two models teach each other on the
//!   receiver's data (cross-entropy plus a KL term towards the other
//!   model's soft predictions), and the receiver keeps the received model's
//!   trajectory.
//! * [`FusionStrategy::FullAvg`]: sample-count weighted average of the full
//!   parameter vectors.
//! * [`FusionStrategy::Combo`]: the sender ships the second half of its
//!   parameters, the receiver ships back the first half, and each side
//!   averages the half it received.
//!
//! Every random draw is keyed by `(seed, client, round, purpose)`, so the
//! trajectory does not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, ClientData, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, cross_entropy_grad_logits, mutual_loss, mutual_loss_grad_logits, softmax,
    Reduction,
};
use crate::metrics::{evaluate, MetricsRecord};
use crate::nn::{
    backward_from, forward_trace, join_segments, segment_boundary, sgd_step, ModelSpec,
    MomentumState, ParamVector,
};
use crate::rng::{self, Purpose, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    #[serde(rename = "defkt")]
    DefKt,
    #[serde(rename = "fullavg")]
    FullAvg,
    #[serde(rename = "combo")]
    Combo,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::DefKt,
        FusionStrategy::FullAvg,
        FusionStrategy::Combo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::DefKt => "defkt",
            FusionStrategy::FullAvg => "fullavg",
            FusionStrategy::Combo => "combo",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "defkt" | "def-kt" => Ok(FusionStrategy::DefKt),
            "fullavg" => Ok(FusionStrategy::FullAvg),
            "combo" => Ok(FusionStrategy::Combo),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?} (expected defkt, fullavg or combo)"
            ))),
        }
    }
}

/// Protocol and optimizer settings for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Number of clients `K`.
    pub clients: usize,
    /// Senders per round `Q`; as many receivers take part.
    pub senders: usize,
    /// Total rounds `T`.
    pub rounds: usize,
    /// Local-update batch size `B1`.
    pub local_batch: usize,
    /// Local-update passes `M`.
    pub local_passes: usize,
    /// Local-update learning rate `η0`.
    pub local_lr: f64,
    /// Knowledge-transfer batch size `B2`.
    pub transfer_batch: usize,
    /// Knowledge-transfer passes `E`.
    pub transfer_passes: usize,
    /// Learning rate `η1` of the received model during transfer.
    pub received_lr: f64,
    /// Learning rate `η2` of the receiver's own model during transfer.
    pub resident_lr: f64,
    pub momentum: f64,
    pub reduction: Reduction,
    /// Combo segment boundary; `None` means `ceil(P / 2)`.
    pub split_index: Option<usize>,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            clients: 10,
            senders: 1,
            rounds: 2500,
            local_batch: 200,
            local_passes: 1,
            local_lr: 0.01,
            transfer_batch: 200,
            transfer_passes: 1,
            received_lr: 0.01,
            resident_lr: 0.01,
            momentum: 0.5,
            reduction: Reduction::Mean,
            split_index: None,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// Sets `η0 = η1 = η2 = lr`.
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.local_lr = lr;
        self.received_lr = lr;
        self.resident_lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clients < 2 {
            return fail(format!("need at least 2 clients, got {}", self.clients));
        }
        if self.senders == 0 {
            return fail("senders per round must be at least 1".into());
        }
        if 2 * self.senders > self.clients {
            return fail(format!(
                "2Q = {} exceeds the {} available clients",
                2 * self.senders,
                self.clients
            ));
        }
        for (name, v) in [
            ("local batch size", self.local_batch),
            ("local passes", self.local_passes),
            ("transfer batch size", self.transfer_batch),
            ("transfer passes", self.transfer_passes),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("local learning rate", self.local_lr),
            ("received-model learning rate", self.received_lr),
            ("resident-model learning rate", self.resident_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        Ok(())
    }

    /// Combo segment boundary for vectors of length `len`.
    pub fn segment_split(&self, len: usize) -> Result<usize> {
        match self.split_index {
            None => Ok(segment_boundary(len)),
            Some(i) if i >= 1 && i < len => Ok(i),
            Some(i) => Err(Error::Config(format!("split index {i} outside 1..{len}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub params: ParamVector,
    /// Velocity left by the client's last optimization; zeroed whenever it
    /// starts a new one.
    pub momentum: MomentumState,
    pub data: ClientData,
}

impl ClientState {
    pub fn new(id: usize, params: ParamVector, momentum: f64, data: ClientData) -> Result<Self> {
        Ok(Self {
            id,
            momentum: MomentumState::new(params.len(), momentum)?,
            params,
            data,
        })
    }

    /// Samples used for weighting in the averaging strategies.
    pub fn sample_count(&self) -> usize {
        self.data.train.len()
    }
}

/// Senders and receivers of one round; sender `j` transmits to receiver `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
}

impl RoundPlan {
    pub fn empty() -> Self {
        Self {
            senders: Vec::new(),
            receivers: Vec::new(),
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.senders
            .iter()
            .copied()
            .zip(self.receivers.iter().copied())
    }

    pub fn participants(&self) -> impl Iterator<Item = usize> + '_ {
        self.senders.iter().chain(&self.receivers).copied()
    }

    /// Equal-sized, duplicate-free, disjoint and within `0..clients`.
    pub fn is_valid_for(&self, clients: usize) -> bool {
        let mut seen = vec![false; clients];
        self.senders.len() == self.receivers.len()
            && self
                .participants()
                .all(|c| c < clients && !std::mem::replace(&mut seen[c], true))
    }
}

/// Draws `2Q` distinct clients for round `round`: the first `Q` send, the
/// next `Q` receive.
pub fn select_round(clients: usize, senders: usize, round: usize, seed: u64) -> Result<RoundPlan> {
    if 2 * senders > clients {
        return Err(Error::Config(format!(
            "2Q = {} exceeds {clients} clients",
            2 * senders
        )));
    }
    let mut rng = rng::stream(seed, u64::MAX, round as u64, Purpose::RoundPlan);
    let mut drawn = rand::seq::index::sample(&mut rng, clients, 2 * senders).into_vec();
    let receivers = drawn.split_off(senders);
    Ok(RoundPlan {
        senders: drawn,
        receivers,
    })
}

/// `passes` epochs of minibatch SGD with momentum on the cross-entropy loss.
#[allow(clippy::too_many_arguments)]
pub fn local_sgd(
    params: &ParamVector,
    train: &Dataset,
    spec: &ModelSpec,
    batch_size: usize,
    passes: usize,
    lr: f64,
    momentum: f64,
    reduction: Reduction,
    rng: &mut StreamRng,
) -> Result<(ParamVector, MomentumState)> {
    if train.is_empty() {
        return Err(Error::Input("local update on an empty training set".into()));
    }
    let mut params = params.clone();
    let mut velocity = MomentumState::new(params.len(), momentum)?;
    for _ in 0..passes {
        for batch in minibatches(train, batch_size, rng) {
            let trace = forward_trace(spec, &params, batch.inputs.view())?;
            let probs = softmax(trace.logits().view());
            let loss = cross_entropy(&probs, &batch.labels, reduction);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("local loss is {loss}")));
            }
            let grad_logits = cross_entropy_grad_logits(&probs, &batch.labels, reduction);
            let grad = backward_from(spec, &params, &trace, grad_logits.view())?;
            sgd_step(&mut params, &grad, &mut velocity, lr)?;
        }
    }
    Ok((params, velocity))
}

/// The sender-side update of a round: returns the new model and velocity.
pub fn local_update(
    client: &ClientState,
    spec: &ModelSpec,
    hyper: &HyperParams,
    rng: &mut StreamRng,
) -> Result<(ParamVector, MomentumState)> {
    local_sgd(
        &client.params,
        &client.data.train,
        spec,
        hyper.local_batch,
        hyper.local_passes,
        hyper.local_lr,
        hyper.momentum,
        hyper.reduction,
        rng,
    )
}

/// Both trajectories of a mutual knowledge transfer.
#[derive(Clone, Debug)]
pub struct TransferOutcome {
    /// The received model after transfer; this replaces the receiver's model.
    pub received: ParamVector,
    /// The receiver's own model after transfer; discarded by the protocol.
    pub resident: ParamVector,
    pub received_momentum: MomentumState,
}

/// Mutual knowledge transfer between a received model and the receiver's
/// own model over `E` shuffled passes of the receiver's training data.
///
/// For each minibatch both models predict first; then each takes one
/// momentum step on cross-entropy plus KL divergence towards the other's
/// pre-step prediction, which is treated as a constant.
pub fn mutual_transfer(
    received: &ParamVector,
    resident: &ParamVector,
    data: &Dataset,
    spec: &ModelSpec,
    hyper: &HyperParams,
    rng: &mut StreamRng,
) -> Result<TransferOutcome> {
    if received.len() != resident.len() {
        return Err(Error::Config(format!(
            "transfer between models of {} and {} parameters",
            received.len(),
            resident.len()
        )));
    }
    let mut received = received.clone();
    let mut resident = resident.clone();
    let mut received_v = MomentumState::new(received.len(), hyper.momentum)?;
    let mut resident_v = MomentumState::new(resident.len(), hyper.momentum)?;
    let red = hyper.reduction;

    for _ in 0..hyper.transfer_passes {
        for batch in minibatches(data, hyper.transfer_batch, rng) {
            let received_trace = forward_trace(spec, &received, batch.inputs.view())?;
            let resident_trace = forward_trace(spec, &resident, batch.inputs.view())?;
            let p1 = softmax(received_trace.logits().view());
            let p2 = softmax(resident_trace.logits().view());

            let (loss1, loss2) = (
                mutual_loss(&p1, &p2, &batch.labels, red),
                mutual_loss(&p2, &p1, &batch.labels, red),
            );
            if !(loss1.is_finite() && loss2.is_finite()) {
                return Err(Error::Numerical(format!(
                    "transfer losses are {loss1} and {loss2}"
                )));
            }

            let g1 = mutual_loss_grad_logits(&p1, &p2, &batch.labels, red);
            let g2 = mutual_loss_grad_logits(&p2, &p1, &batch.labels, red);
            let grad1 = backward_from(spec, &received, &received_trace, g1.view())?;
            let grad2 = backward_from(spec, &resident, &resident_trace, g2.view())?;
            sgd_step(&mut received, &grad1, &mut received_v, hyper.received_lr)?;
            sgd_step(&mut resident, &grad2, &mut resident_v, hyper.resident_lr)?;
        }
    }
    Ok(TransferOutcome {
        received,
        resident,
        received_momentum: received_v,
    })
}

/// Def-KT fusion: the received model after mutual transfer.
pub fn fuse_defkt(
    received: &ParamVector,
    resident: &ParamVector,
    data: &Dataset,
    spec: &ModelSpec,
    hyper: &HyperParams,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    mutual_transfer(received, resident, data, spec, hyper, rng).map(|o| o.received)
}

/// `(n_a·a + n_b·b) / (n_a + n_b)` elementwise. Equal entries pass through
/// unchanged, so averaging a vector with itself is exact.
pub fn weighted_average(a: &[f64], b: &[f64], n_a: usize, n_b: usize) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "averaging vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if n_a == 0 || n_b == 0 {
        return Err(Error::Input(format!(
            "sample counts must be positive, got {n_a} and {n_b}"
        )));
    }
    let (wa, wb) = (n_a as f64, n_b as f64);
    let total = wa + wb;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| if x == y { x } else { (wa * x + wb * y) / total })
        .collect())
}

/// FullAvg fusion of the sender's model `received` into `resident`.
pub fn fuse_fullavg(
    received: &ParamVector,
    resident: &ParamVector,
    n_a: usize,
    n_b: usize,
) -> Result<ParamVector> {
    weighted_average(received, resident, n_a, n_b).map(ParamVector::from)
}

/// Combo fusion with the default midpoint boundary. Returns the new
/// `(sender, receiver)` models.
pub fn fuse_combo(
    sender: &ParamVector,
    receiver: &ParamVector,
    n_a: usize,
    n_b: usize,
) -> Result<(ParamVector, ParamVector)> {
    fuse_combo_at(sender, receiver, n_a, n_b, segment_boundary(sender.len()))
}

/// Combo fusion with the segments split at `split`.
pub fn fuse_combo_at(
    sender: &ParamVector,
    receiver: &ParamVector,
    n_a: usize,
    n_b: usize,
    split: usize,
) -> Result<(ParamVector, ParamVector)> {
    if sender.len() != receiver.len() {
        return Err(Error::Config(format!(
            "combo fusion of vectors of length {} and {}",
            sender.len(),
            receiver.len()
        )));
    }
    if sender.len() < 2 || split == 0 || split >= sender.len() {
        return Err(Error::Config(format!(
            "split {split} invalid for length {}",
            sender.len()
        )));
    }
    let (s1, s2) = sender.split_at(split);
    let (r1, r2) = receiver.split_at(split);
    let new_sender = join_segments(&weighted_average(s1, r1, n_a, n_b)?, s2);
    let new_receiver = join_segments(r1, &weighted_average(s2, r2, n_a, n_b)?);
    Ok((new_sender, new_receiver))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Model(ParamVector),
    Segment { segment: Segment, values: Vec<f64> },
}

impl Payload {
    pub fn scalars(&self) -> usize {
        match self {
            Payload::Model(p) => p.len(),
            Payload::Segment { values, .. } => values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Payload,
}

/// In-process stand-in for the peer-to-peer links, counting traffic.
#[derive(Debug, Default)]
pub struct Network {
    in_flight: Vec<Message>,
    scalars: u64,
    messages: u64,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, message: Message) {
        self.scalars += message.payload.scalars() as u64;
        self.messages += 1;
        self.in_flight.push(message);
    }

    /// Removes and returns the oldest undelivered message from `from` to `to`.
    pub fn receive(&mut self, from: usize, to: usize) -> Option<Message> {
        let pos = self
            .in_flight
            .iter()
            .position(|m| m.from == from && m.to == to)?;
        Some(self.in_flight.remove(pos))
    }

    pub fn scalars_transmitted(&self) -> u64 {
        self.scalars
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }
}

fn expect_message(net: &mut Network, from: usize, to: usize) -> Result<Message> {
    net.receive(from, to)
        .ok_or_else(|| Error::Numerical(format!("no message from client {from} to client {to}")))
}

/// Result of one receiver's (and under Combo, one sender's) fusion.
struct FusionUpdate {
    receiver: (ParamVector, Option<MomentumState>),
    sender: Option<ParamVector>,
}

/// Executes one round of the protocol in place.
///
/// Senders update and transmit first; fusions start only after every
/// transmission. Clients outside the plan are untouched.
pub fn run_round(
    states: &mut [ClientState],
    plan: &RoundPlan,
    strategy: FusionStrategy,
    hyper: &HyperParams,
    spec: &ModelSpec,
    round: usize,
    net: &mut Network,
) -> Result<()> {
    if !plan.is_valid_for(states.len()) {
        return Err(Error::Config(format!(
            "round plan {plan:?} invalid for {} clients",
            states.len()
        )));
    }
    if plan.senders.is_empty() {
        return Ok(());
    }
    let seed = hyper.seed;

    let updates = plan
        .senders
        .par_iter()
        .map(|&s| {
            let mut rng = rng::stream(seed, s as u64, round as u64, Purpose::LocalUpdate);
            local_update(&states[s], spec, hyper, &mut rng).map_err(|e| e.in_round(round, s))
        })
        .collect::<Result<Vec<_>>>()?;
    for (&s, (params, velocity)) in plan.senders.iter().zip(updates) {
        states[s].params = params;
        states[s].momentum = velocity;
    }

    let split = hyper.segment_split(spec.param_count())?;
    for (s, r) in plan.pairs() {
        let payload = match strategy {
            FusionStrategy::DefKt | FusionStrategy::FullAvg => {
                Payload::Model(states[s].params.clone())
            }
            FusionStrategy::Combo => Payload::Segment {
                segment: Segment::Second,
                values: states[s].params[split..].to_vec(),
            },
        };
        net.send(Message {
            from: s,
            to: r,
            payload,
        });
    }
    if strategy == FusionStrategy::Combo {
        for (s, r) in plan.pairs() {
            net.send(Message {
                from: r,
                to: s,
                payload: Payload::Segment {
                    segment: Segment::First,
                    values: states[r].params[..split].to_vec(),
                },
            });
        }
    }

    let deliveries = plan
        .pairs()
        .map(|(s, r)| {
            let to_receiver = expect_message(net, s, r)?;
            let to_sender = match strategy {
                FusionStrategy::Combo => Some(expect_message(net, r, s)?),
                _ => None,
            };
            Ok((s, r, to_receiver, to_sender))
        })
        .collect::<Result<Vec<_>>>()?;

    let view: &[ClientState] = states;
    let fused = deliveries
        .into_par_iter()
        .map(|(s, r, to_receiver, to_sender)| {
            let (sender, receiver) = (&view[s], &view[r]);
            let (n_a, n_b) = (sender.sample_count(), receiver.sample_count());
            let update = match (strategy, to_receiver.payload, to_sender.map(|m| m.payload)) {
                (FusionStrategy::DefKt, Payload::Model(w), None) => {
                    let mut rng =
                        rng::stream(seed, r as u64, round as u64, Purpose::KnowledgeTransfer);
                    let out = mutual_transfer(
                        &w,
                        &receiver.params,
                        &receiver.data.train,
                        spec,
                        hyper,
                        &mut rng,
                    )
                    .map_err(|e| e.in_round(round, r))?;
                    FusionUpdate {
                        receiver: (out.received, Some(out.received_momentum)),
                        sender: None,
                    }
                }
                (FusionStrategy::FullAvg, Payload::Model(w), None) => FusionUpdate {
                    receiver: (fuse_fullavg(&w, &receiver.params, n_a, n_b)?, None),
                    sender: None,
                },
                (
                    FusionStrategy::Combo,
                    Payload::Segment {
                        segment: Segment::Second,
                        values: sent_second,
                    },
                    Some(Payload::Segment {
                        segment: Segment::First,
                        values: returned_first,
                    }),
                ) => {
                    let (r1, r2) = receiver.params.split_at(split);
                    let (s1, s2) = sender.params.split_at(split);
                    FusionUpdate {
                        receiver: (
                            join_segments(r1, &weighted_average(&sent_second, r2, n_a, n_b)?),
                            None,
                        ),
                        sender: Some(join_segments(
                            &weighted_average(s1, &returned_first, n_a, n_b)?,
                            s2,
                        )),
                    }
                }
                _ => {
                    return Err(
                        Error::Numerical(format!("unexpected payload for {strategy}"))
                            .in_round(round, r),
                    )
                }
            };
            Ok((s, r, update))
        })
        .collect::<Result<Vec<_>>>()?;

    for (s, r, update) in fused {
        let (params, velocity) = update.receiver;
        states[r].params = params;
        match velocity {
            Some(v) => states[r].momentum = v,
            None => states[r].momentum.reset(),
        }
        if let Some(params) = update.sender {
            states[s].params = params;
        }
    }
    Ok(())
}

/// Everything a run needs that is shared between strategies: the partition,
/// the common initial model and the test set.
#[derive(Clone, Debug)]
pub struct ExperimentSetup {
    pub spec: ModelSpec,
    pub hyper: HyperParams,
    pub clients: Vec<ClientData>,
    pub test: Dataset,
    pub initial: ParamVector,
    /// Evaluate after every `eval_every` rounds (and after the last one).
    pub eval_every: usize,
}

impl ExperimentSetup {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.clients.len() != self.hyper.clients {
            return Err(Error::Config(format!(
                "{} client datasets for K = {}",
                self.clients.len(),
                self.hyper.clients
            )));
        }
        if self.initial.len() != self.spec.param_count() {
            return Err(Error::Config(
                "initial parameters do not match the model".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some((k, _)) = self
            .clients
            .iter()
            .enumerate()
            .find(|(_, c)| c.train.is_empty())
        {
            return Err(Error::Config(format!("client {k} has no training data")));
        }
        Ok(())
    }

    pub fn initial_states(&self) -> Result<Vec<ClientState>> {
        self.clients
            .iter()
            .enumerate()
            .map(|(k, data)| {
                ClientState::new(k, self.initial.clone(), self.hyper.momentum, data.clone())
            })
            .collect()
    }
}

/// A run in progress, advanced one round at a time.
pub struct Simulation<'a> {
    setup: &'a ExperimentSetup,
    strategy: FusionStrategy,
    states: Vec<ClientState>,
    network: Network,
    completed: usize,
    /// Cached (test, validation) accuracy per client, cleared when it changes.
    accuracy: Vec<Option<(f64, f64)>>,
}

impl<'a> Simulation<'a> {
    pub fn new(setup: &'a ExperimentSetup, strategy: FusionStrategy) -> Result<Self> {
        setup.validate()?;
        let states = setup.initial_states()?;
        Ok(Self {
            accuracy: vec![None; states.len()],
            setup,
            strategy,
            states,
            network: Network::new(),
            completed: 0,
        })
    }

    pub fn states(&self) -> &[ClientState] {
        &self.states
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn completed_rounds(&self) -> usize {
        self.completed
    }

    /// Runs the next round and returns its plan.
    pub fn step(&mut self) -> Result<RoundPlan> {
        let hyper = &self.setup.hyper;
        let round = self.completed;
        let plan = select_round(hyper.clients, hyper.senders, round, hyper.seed)?;
        run_round(
            &mut self.states,
            &plan,
            self.strategy,
            hyper,
            &self.setup.spec,
            round,
            &mut self.network,
        )?;
        for c in plan.participants() {
            self.accuracy[c] = None;
        }
        self.completed += 1;
        Ok(plan)
    }

    /// Runs the remaining rounds, evaluating now, after every `eval_every`
    /// rounds and after the final round. Each record is passed to
    /// `on_record` as soon as it is computed.
    pub fn run(&mut self, mut on_record: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let (rounds, every) = (self.setup.hyper.rounds, self.setup.eval_every);
        let mut timeline = Vec::new();
        let mut record = |sim: &mut Self| -> Result<()> {
            let r = sim.evaluate()?;
            on_record(&r);
            timeline.push(r);
            Ok(())
        };
        record(self)?;
        while self.completed < rounds {
            self.step()?;
            if self.completed.is_multiple_of(every) || self.completed == rounds {
                record(self)?;
            }
        }
        Ok(timeline)
    }

    /// Global and local accuracy of the current models.
    pub fn evaluate(&mut self) -> Result<MetricsRecord> {
        let (spec, test) = (&self.setup.spec, &self.setup.test);
        let states = &self.states;
        let fresh = self
            .accuracy
            .par_iter()
            .enumerate()
            .map(|(k, cached)| match cached {
                Some(acc) => Ok(*acc),
                None => Ok((
                    evaluate(spec, &states[k].params, test)?,
                    evaluate(spec, &states[k].params, &states[k].data.validation)?,
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        let n = fresh.len() as f64;
        let record = MetricsRecord {
            round: self.completed,
            strategy: self.strategy,
            seed: self.setup.hyper.seed,
            global_acc: fresh.iter().map(|a| a.0).sum::<f64>() / n,
            local_acc: fresh.iter().map(|a| a.1).sum::<f64>() / n,
            scalars_transmitted: self.network.scalars_transmitted(),
        };
        self.accuracy = fresh.into_iter().map(Some).collect();
        Ok(record)
    }
}

/// Runs `strategy` for `hyper.rounds` rounds; see [`Simulation::run`].
pub fn run_experiment(
    setup: &ExperimentSetup,
    strategy: FusionStrategy,
    on_record: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    Simulation::new(setup, strategy)?.run(on_record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_iid, synth_dataset, synth_test_set, train_val_split, SynthConfig};
    use crate::losses::one_hot;
    use crate::nn::{backward, init_params, split_segments, GradVector};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn blobs(per_class: usize, seed: u64) -> (Dataset, Dataset) {
        let cfg = SynthConfig {
            classes: 3,
            per_class,
            dims: 4,
            sigma: 0.5,
            seed,
        };
        (
            synth_dataset(&cfg).unwrap(),
            synth_test_set(&cfg, 20).unwrap(),
        )
    }

    fn small_setup(clients: usize, senders: usize, rounds: usize) -> ExperimentSetup {
        let (train, test) = blobs(40, 1);
        let spec = ModelSpec::mlp(4, &[6], 3).unwrap();
        let hyper = HyperParams {
            clients,
            senders,
            rounds,
            local_batch: 8,
            transfer_batch: 8,
            seed: 5,
            ..HyperParams::default()
        }
        .with_learning_rate(0.1);
        let clients = partition_iid(&train, clients, 2)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(k, d)| train_val_split(d, 0.8, k as u64).unwrap())
            .collect();
        ExperimentSetup {
            initial: init_params(&spec, 3),
            spec,
            hyper,
            clients,
            test,
            eval_every: 2,
        }
    }

    fn test_rng() -> StreamRng {
        StreamRng::seed_from_u64(99)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("fedavg".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let bad = |f: fn(&mut HyperParams)| {
            let mut h = HyperParams::default();
            f(&mut h);
            h.validate().is_err()
        };
        assert!(bad(|h| h.senders = 6));
        assert!(bad(|h| h.senders = 0));
        assert!(bad(|h| h.local_batch = 0));
        assert!(bad(|h| h.received_lr = 0.0));
        assert!(bad(|h| h.momentum = 1.0));
        assert!(bad(|h| h.clients = 1));
    }

    #[test]
    fn round_plans_are_disjoint_pairs() {
        let plan = select_round(10, 1, 0, 3).unwrap();
        assert_eq!((plan.senders.len(), plan.receivers.len()), (1, 1));
        assert_ne!(plan.senders[0], plan.receivers[0]);

        for round in 0..20 {
            let plan = select_round(2, 1, round, 7).unwrap();
            let pair = (plan.senders[0], plan.receivers[0]);
            assert!(pair == (0, 1) || pair == (1, 0));
        }
        assert_eq!(
            select_round(10, 3, 4, 1).unwrap(),
            select_round(10, 3, 4, 1).unwrap()
        );
        assert!(matches!(select_round(10, 6, 0, 1), Err(Error::Config(_))));
        assert!(select_round(10, 0, 0, 1).unwrap().senders.is_empty());
    }

    #[test]
    fn ordered_pairs_are_uniform() {
        // 10k draws over 90 ordered pairs: each count within 3 sigma of 10000/90
        let mut counts = vec![0usize; 100];
        let draws = 10_000;
        for round in 0..draws {
            let plan = select_round(10, 1, round, 11).unwrap();
            counts[plan.senders[0] * 10 + plan.receivers[0]] += 1;
        }
        let p = 1.0 / 90.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for s in 0..10 {
            for r in 0..10 {
                let c = counts[s * 10 + r] as f64;
                if s == r {
                    assert_eq!(c, 0.0);
                } else {
                    assert!(
                        (c - mean).abs() <= 3.0 * sd + 1.0,
                        "pair ({s},{r}) seen {c} times"
                    );
                    chi2 += (c - mean).powi(2) / mean;
                }
            }
        }
        // 89 degrees of freedom; 99.9th percentile is about 135
        assert!(chi2 < 135.0, "chi-square {chi2}");
    }

    #[test]
    fn local_update_with_zero_rate_keeps_params() {
        let setup = small_setup(4, 1, 0);
        let states = setup.initial_states().unwrap();
        let hyper = HyperParams {
            local_passes: 3,
            ..setup.hyper.clone()
        }
        .with_learning_rate(0.0);
        let (p, _) = local_update(&states[0], &setup.spec, &hyper, &mut test_rng()).unwrap();
        assert_eq!(p, states[0].params);
    }

    #[test]
    fn full_batch_local_update_is_one_gradient_step() {
        let setup = small_setup(4, 1, 0);
        let state = &setup.initial_states().unwrap()[1];
        let train = &state.data.train;
        let hyper = HyperParams {
            local_batch: train.len(),
            local_passes: 1,
            momentum: 0.0,
            ..setup.hyper.clone()
        };
        let (p, _) = local_update(state, &setup.spec, &hyper, &mut test_rng()).unwrap();

        let batch = train.to_batch();
        let logits = crate::nn::forward(&setup.spec, &state.params, batch.inputs.view()).unwrap();
        let g = cross_entropy_grad_logits(&softmax(logits.view()), &batch.labels, Reduction::Mean);
        let grad = backward(&setup.spec, &state.params, batch.inputs.view(), g.view()).unwrap();
        let mut expected = state.params.clone();
        let mut v = MomentumState::new(expected.len(), 0.0).unwrap();
        sgd_step(&mut expected, &grad, &mut v, hyper.local_lr).unwrap();
        // the batch order differs, so sums differ only by rounding
        for (a, b) in p.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_training_reduces_loss() {
        let (train, _) = blobs(34, 4);
        let train = train.head(100);
        let spec = ModelSpec::mlp(4, &[8], 3).unwrap();
        let init = init_params(&spec, 0);
        let loss = |p: &ParamVector| {
            let b = train.to_batch();
            cross_entropy(
                &softmax(
                    crate::nn::forward(&spec, p, b.inputs.view())
                        .unwrap()
                        .view(),
                ),
                &b.labels,
                Reduction::Mean,
            )
        };
        let (trained, _) = local_sgd(
            &init,
            &train,
            &spec,
            10,
            10,
            0.05,
            0.5,
            Reduction::Mean,
            &mut test_rng(),
        )
        .unwrap();
        assert!(loss(&trained) < loss(&init));
    }

    #[test]
    fn local_update_reports_divergence() {
        let setup = small_setup(4, 1, 0);
        let mut state = setup.initial_states().unwrap()[0].clone();
        state.params[0] = f64::NAN;
        let err = local_update(&state, &setup.spec, &setup.hyper, &mut test_rng()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn transfer_with_zero_rates_or_passes_returns_received() {
        let setup = small_setup(4, 1, 0);
        let states = setup.initial_states().unwrap();
        let received = init_params(&setup.spec, 77);
        let zero = setup.hyper.clone().with_learning_rate(0.0);
        let out = fuse_defkt(
            &received,
            &states[0].params,
            &states[0].data.train,
            &setup.spec,
            &zero,
            &mut test_rng(),
        )
        .unwrap();
        assert_eq!(out, received);
        let no_pass = HyperParams {
            transfer_passes: 0,
            ..setup.hyper.clone()
        };
        let out = fuse_defkt(
            &received,
            &states[0].params,
            &states[0].data.train,
            &setup.spec,
            &no_pass,
            &mut test_rng(),
        )
        .unwrap();
        assert_eq!(out, received);
    }

    #[test]
    fn identical_models_follow_identical_trajectories() {
        let setup = small_setup(4, 1, 0);
        let states = setup.initial_states().unwrap();
        let w = init_params(&setup.spec, 12);
        let hyper = HyperParams {
            transfer_passes: 3,
            ..setup.hyper.clone()
        };
        let out = mutual_transfer(
            &w,
            &w,
            &states[2].data.train,
            &setup.spec,
            &hyper,
            &mut test_rng(),
        )
        .unwrap();
        assert_eq!(out.received, out.resident);
        assert_ne!(out.received, w);
    }

    #[test]
    fn single_sample_transfer_matches_hand_composition() {
        let spec = ModelSpec::mlp(4, &[5], 3).unwrap();
        let x = Array2::from_shape_vec((1, 4), vec![0.2, -0.4, 1.1, 0.3]).unwrap();
        let data = Dataset::new(x.clone(), vec![2], 3).unwrap();
        let (received, resident) = (init_params(&spec, 1), init_params(&spec, 2));
        let hyper = HyperParams {
            transfer_batch: 1,
            transfer_passes: 1,
            ..HyperParams::default()
        }
        .with_learning_rate(0.3);
        let out = fuse_defkt(&received, &resident, &data, &spec, &hyper, &mut test_rng()).unwrap();

        let p1 = softmax(
            crate::nn::forward(&spec, &received, x.view())
                .unwrap()
                .view(),
        );
        let p2 = softmax(
            crate::nn::forward(&spec, &resident, x.view())
                .unwrap()
                .view(),
        );
        let h = one_hot(2, 3).unwrap();
        let g = (&p1.probs().row(0) * 2.0 - &h - p2.probs().row(0)).insert_axis(ndarray::Axis(0));
        let grad: GradVector = backward(&spec, &received, x.view(), g.view()).unwrap();
        // first step from zero velocity: w - lr * grad
        let expected: Vec<f64> = received
            .iter()
            .zip(grad.iter())
            .map(|(w, g)| w - 0.3 * g)
            .collect();
        assert_eq!(out.as_slice(), &expected[..]);
    }

    #[test]
    fn fullavg_hand_values() {
        let a = ParamVector::from(vec![1.0, 3.0]);
        let b = ParamVector::from(vec![5.0, 7.0]);
        assert_eq!(fuse_fullavg(&a, &b, 1, 3).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(fuse_fullavg(&a, &b, 2, 2).unwrap().as_slice(), &[3.0, 5.0]);
        assert_eq!(fuse_fullavg(&a, &a, 7, 3).unwrap(), a);
        assert!(fuse_fullavg(&a, &ParamVector::zeros(3), 1, 1).is_err());
    }

    #[test]
    fn combo_hand_values() {
        let sender = ParamVector::from(vec![2.0, 2.0, 10.0, 10.0]);
        let receiver = ParamVector::from(vec![6.0, 6.0, 20.0, 20.0]);
        let (s, r) = fuse_combo(&sender, &receiver, 5, 5).unwrap();
        assert_eq!(s.as_slice(), &[4.0, 4.0, 10.0, 10.0]);
        assert_eq!(r.as_slice(), &[6.0, 6.0, 15.0, 15.0]);
        let (s, r) = fuse_combo(&sender, &sender, 3, 9).unwrap();
        assert_eq!((s, r), (sender.clone(), sender.clone()));
        assert!(fuse_combo(&sender, &ParamVector::zeros(2), 1, 1).is_err());
        assert!(fuse_combo_at(&sender, &receiver, 1, 1, 4).is_err());
    }

    proptest! {
        #[test]
        fn fullavg_is_affine(
            pair in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50),
            alpha in -3.0f64..3.0,
            n_a in 1usize..1000,
            n_b in 1usize..1000,
        ) {
            let a = ParamVector::from(pair.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = ParamVector::from(pair.iter().map(|p| p.1).collect::<Vec<_>>());
            let scaled = |v: &ParamVector| ParamVector::from(v.iter().map(|x| alpha * x).collect::<Vec<_>>());
            let lhs = fuse_fullavg(&scaled(&a), &scaled(&b), n_a, n_b).unwrap();
            let rhs = fuse_fullavg(&a, &b, n_a, n_b).unwrap();
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - alpha * r).abs() <= 1e-12 * (1.0 + r.abs() * alpha.abs()));
            }
        }

        #[test]
        fn combo_preserves_lengths_and_untouched_halves(
            values in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..60),
        ) {
            let a = ParamVector::from(values.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = ParamVector::from(values.iter().map(|p| p.1).collect::<Vec<_>>());
            let (s, r) = fuse_combo(&a, &b, 3, 4).unwrap();
            let (a1, a2) = split_segments(&a);
            let (b1, _) = split_segments(&b);
            prop_assert_eq!(s.len(), a.len());
            prop_assert_eq!(r.len(), a.len());
            prop_assert_eq!(split_segments(&s).1, a2);
            prop_assert_eq!(split_segments(&r).0, b1);
            prop_assert_eq!(a1.len() + a2.len(), a.len());
        }
    }

    #[test]
    fn empty_round_is_a_no_op() {
        let setup = small_setup(4, 1, 0);
        let mut states = setup.initial_states().unwrap();
        let before: Vec<ParamVector> = states.iter().map(|s| s.params.clone()).collect();
        let mut net = Network::new();
        for strategy in FusionStrategy::ALL {
            run_round(
                &mut states,
                &RoundPlan::empty(),
                strategy,
                &setup.hyper,
                &setup.spec,
                0,
                &mut net,
            )
            .unwrap();
        }
        let after: Vec<ParamVector> = states.iter().map(|s| s.params.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(net.scalars_transmitted(), 0);
    }

    #[test]
    fn fullavg_round_composes_local_update_and_average() {
        let setup = small_setup(2, 1, 0);
        let spec = &setup.spec;
        // make the two clients start from different models
        let mut states = setup.initial_states().unwrap();
        states[1].params = init_params(spec, 40);
        let plan = RoundPlan {
            senders: vec![1],
            receivers: vec![0],
        };
        let before = states.clone();
        let mut net = Network::new();
        run_round(
            &mut states,
            &plan,
            FusionStrategy::FullAvg,
            &setup.hyper,
            spec,
            6,
            &mut net,
        )
        .unwrap();

        let mut rng = rng::stream(setup.hyper.seed, 1, 6, Purpose::LocalUpdate);
        let (updated, _) = local_update(&before[1], spec, &setup.hyper, &mut rng).unwrap();
        let fused = fuse_fullavg(
            &updated,
            &before[0].params,
            before[1].sample_count(),
            before[0].sample_count(),
        )
        .unwrap();
        assert_eq!(states[1].params, updated);
        assert_eq!(states[0].params, fused);
        assert_eq!(net.scalars_transmitted(), spec.param_count() as u64);
        assert_eq!(net.pending(), 0);
    }

    #[test]
    fn combo_round_matches_pairwise_fusion() {
        let setup = small_setup(4, 1, 0);
        let spec = &setup.spec;
        let mut states = setup.initial_states().unwrap();
        for (k, s) in states.iter_mut().enumerate() {
            s.params = init_params(spec, 100 + k as u64);
        }
        let plan = RoundPlan {
            senders: vec![3],
            receivers: vec![1],
        };
        let before = states.clone();
        let mut net = Network::new();
        run_round(
            &mut states,
            &plan,
            FusionStrategy::Combo,
            &setup.hyper,
            spec,
            2,
            &mut net,
        )
        .unwrap();

        let mut rng = rng::stream(setup.hyper.seed, 3, 2, Purpose::LocalUpdate);
        let (updated, _) = local_update(&before[3], spec, &setup.hyper, &mut rng).unwrap();
        let (s, r) = fuse_combo(
            &updated,
            &before[1].params,
            before[3].sample_count(),
            before[1].sample_count(),
        )
        .unwrap();
        assert_eq!(states[3].params, s);
        assert_eq!(states[1].params, r);
        assert_eq!(states[0].params, before[0].params);
        assert_eq!(states[2].params, before[2].params);
        assert_eq!(net.scalars_transmitted(), spec.param_count() as u64);
        assert_eq!(net.messages_sent(), 2);
    }

    #[test]
    fn rounds_change_only_participants() {
        let setup = small_setup(10, 2, 0);
        for strategy in FusionStrategy::ALL {
            let mut sim = Simulation::new(&setup, strategy).unwrap();
            for _ in 0..6 {
                let before: Vec<ParamVector> =
                    sim.states().iter().map(|s| s.params.clone()).collect();
                let sent_before = sim.network().scalars_transmitted();
                let plan = sim.step().unwrap();
                assert!(plan.is_valid_for(10));
                for (k, s) in sim.states().iter().enumerate() {
                    if !plan.participants().any(|p| p == k) {
                        assert_eq!(s.params, before[k]);
                    }
                    assert_eq!(s.params.len(), setup.spec.param_count());
                }
                let per_pair = (sim.network().scalars_transmitted() - sent_before) / 2;
                assert_eq!(per_pair, setup.spec.param_count() as u64);
            }
        }
    }

    #[test]
    fn zero_rounds_evaluates_the_shared_model_once() {
        let setup = small_setup(4, 1, 0);
        let timeline = run_experiment(&setup, FusionStrategy::DefKt, |_| {}).unwrap();
        assert_eq!(timeline.len(), 1);
        assert_eq!(timeline[0].round, 0);
        let acc = evaluate(&setup.spec, &setup.initial, &setup.test).unwrap();
        assert_eq!(timeline[0].global_acc, acc);
    }

    #[test]
    fn experiment_schedule_and_determinism() {
        let setup = small_setup(6, 1, 7);
        let mut streamed = Vec::new();
        let a = run_experiment(&setup, FusionStrategy::DefKt, |r| streamed.push(r.round)).unwrap();
        assert_eq!(streamed, vec![0, 2, 4, 6, 7]);
        let b = run_experiment(&setup, FusionStrategy::DefKt, |_| {}).unwrap();
        assert_eq!(a, b);
        assert!(a
            .windows(2)
            .all(|w| w[0].scalars_transmitted <= w[1].scalars_transmitted));
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.global_acc)));
    }

    #[test]
    fn cached_evaluation_matches_direct_aggregates() {
        let setup = small_setup(6, 1, 0);
        let mut sim = Simulation::new(&setup, FusionStrategy::Combo).unwrap();
        for _ in 0..5 {
            sim.step().unwrap();
            let rec = sim.evaluate().unwrap();
            let g =
                crate::metrics::global_accuracy(sim.states(), &setup.spec, &setup.test).unwrap();
            let l = crate::metrics::local_accuracy(sim.states(), &setup.spec).unwrap();
            assert!((rec.global_acc - g).abs() < 1e-15);
            assert!((rec.local_acc - l).abs() < 1e-15);
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let setup = small_setup(10, 3, 4);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_experiment(&setup, FusionStrategy::DefKt, |_| {}).unwrap())
        };
        assert_eq!(run(1), run(3));
    }
}
