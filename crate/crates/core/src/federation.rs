//! Message-level simulation of the federated alignment protocol.
//!
//! The AP owns the pilot matrix `X`, the pre-equalizer iterates and (with
//! CSI) the user channels. Each user owns its whitened targets `Y_l`, its
//! channel and its equalizer `G_l`. Only the message types below cross the
//! AP/user boundary:
//!
//! * [`HandshakeMsg`]: user id, latent dimension, pilot count.
//! * [`DownlinkShare`]: `S_l = H_l F X` with CSI at the AP, `F X` without.
//! * [`UplinkShare`]: `A_l = (G_l H_l)^H (G_l H_l)` and `P_l = (G_l H_l)^H Y_l`.
//!
//! Rounds are synchronous. Messages travel through per-node FIFO queues and
//! the AP processes uplink shares sorted by user id, so results do not depend
//! on the order in which users are stored or scheduled.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::admm::{
    self, downlink_signal, f_step, user_g_step, user_shares, u_update, z_update, AdmmOptions,
    AdmmState, Aggregation, AlignmentProblem, IterationRecord, LocalFIngredients, NoiseWeighting,
    PilotGram,
};
use crate::channel::MimoChannel;
use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, frobenius_sq, hermitian_deviation, matmul, ComplexMatrix};

mod wire {
    use serde::ser::SerializeStruct;
    use serde::Serializer;

    use crate::linalg::ComplexMatrix;

    pub fn matrix<S: Serializer>(m: &ComplexMatrix, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("ComplexMatrix", 4)?;
        st.serialize_field("rows", &m.nrows())?;
        st.serialize_field("cols", &m.ncols())?;
        st.serialize_field("re", &m.iter().map(|z| z.re).collect::<Vec<_>>())?;
        st.serialize_field("im", &m.iter().map(|z| z.im).collect::<Vec<_>>())?;
        st.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HandshakeMsg {
    pub user_id: usize,
    /// Real latent dimension `m_l` (even).
    pub latent_dim: usize,
    pub pilots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownlinkShare {
    pub user_id: usize,
    pub iteration: usize,
    #[serde(serialize_with = "wire::matrix")]
    pub s: ComplexMatrix,
}

impl DownlinkShare {
    pub fn payload(&self) -> usize {
        self.s.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UplinkShare {
    pub user_id: usize,
    pub iteration: usize,
    #[serde(serialize_with = "wire::matrix")]
    pub a: ComplexMatrix,
    #[serde(serialize_with = "wire::matrix")]
    pub p: ComplexMatrix,
}

impl UplinkShare {
    pub fn payload(&self) -> usize {
        self.a.len() + self.p.len()
    }
}

/// Every message that can cross the AP/user boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Handshake(HandshakeMsg),
    Downlink(DownlinkShare),
    Uplink(UplinkShare),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Downlink,
    Uplink,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Downlink => "downlink",
            Direction::Uplink => "uplink",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MessageRecord {
    pub t: usize,
    pub direction: Direction,
    pub user_id: usize,
    pub payload_complex_scalars: usize,
}

/// Complex-scalar counts of every iteration message.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PayloadLedger {
    pub records: Vec<MessageRecord>,
}

impl PayloadLedger {
    pub fn record(&mut self, t: usize, direction: Direction, user_id: usize, payload: usize) {
        self.records.push(MessageRecord {
            t,
            direction,
            user_id,
            payload_complex_scalars: payload,
        });
    }

    fn total_for(&self, direction: Direction) -> usize {
        self.records
            .iter()
            .filter(|r| r.direction == direction)
            .map(|r| r.payload_complex_scalars)
            .sum()
    }

    pub fn total_downlink(&self) -> usize {
        self.total_for(Direction::Downlink)
    }

    pub fn total_uplink(&self) -> usize {
        self.total_for(Direction::Uplink)
    }

    pub fn total(&self) -> usize {
        self.total_downlink() + self.total_uplink()
    }

    /// Per-iteration, per-user counts for one direction.
    pub fn per_user(&self, direction: Direction) -> BTreeMap<(usize, usize), usize> {
        let mut out = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.direction == direction) {
            *out.entry((r.t, r.user_id)).or_insert(0) += r.payload_complex_scalars;
        }
        out
    }

    pub fn extend(&mut self, other: &PayloadLedger) {
        self.records.extend_from_slice(&other.records);
    }

    /// CSV lines `t,direction,user_id,payload_complex_scalars`.
    pub fn write_round_trace<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "direction", "user_id", "payload_complex_scalars"])?;
        for r in &self.records {
            wtr.write_record([
                r.t.to_string(),
                r.direction.as_str().to_string(),
                r.user_id.to_string(),
                r.payload_complex_scalars.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Fixed participants and options agreed during the handshake.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    /// Ascending user ids; this is the processing order of every round.
    pub user_ids: Vec<usize>,
    pub latent_dims: BTreeMap<usize, usize>,
    pub pilots: usize,
    pub csi: bool,
}

impl Session {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }
}

#[derive(Debug, Clone)]
pub struct UserNode {
    id: usize,
    targets: ComplexMatrix,
    channel: MimoChannel,
    g: ComplexMatrix,
    num_users: usize,
    weighting: NoiseWeighting,
    inbox: VecDeque<DownlinkShare>,
}

impl UserNode {
    /// `targets` are the whitened, paired `Y_l` and never leave the node.
    pub fn new(id: usize, targets: ComplexMatrix, channel: MimoChannel) -> Self {
        let g = ComplexMatrix::zeros(targets.nrows(), channel.rx_dim());
        UserNode {
            id,
            targets,
            channel,
            g,
            num_users: 1,
            weighting: NoiseWeighting::PerUser,
            inbox: VecDeque::new(),
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn equalizer(&self) -> &ComplexMatrix {
        &self.g
    }

    pub fn channel(&self) -> &MimoChannel {
        &self.channel
    }

    pub fn request(&self) -> HandshakeMsg {
        HandshakeMsg {
            user_id: self.id,
            latent_dim: 2 * self.targets.nrows(),
            pilots: self.targets.ncols(),
        }
    }

    pub fn join(&mut self, session: &Session, weighting: NoiseWeighting) {
        self.num_users = session.num_users();
        self.weighting = weighting;
    }

    pub fn deliver(&mut self, share: DownlinkShare) {
        self.inbox.push_back(share);
    }

    /// Processes the oldest queued downlink share.
    pub fn process_inbox(&mut self) -> Result<Option<UplinkShare>> {
        match self.inbox.pop_front() {
            Some(share) => user_round(self, &share).map(Some),
            None => Ok(None),
        }
    }
}

/// User side of one round: G-step from the downlink share, then the uplink
/// quantities `A_l` and `P_l`.
pub fn user_round(user: &mut UserNode, share: &DownlinkShare) -> Result<UplinkShare> {
    if share.user_id != user.id {
        return Err(Error::invalid(format!(
            "user {} received a share addressed to user {}",
            user.id, share.user_id
        )));
    }
    let n = user.targets.ncols();
    let m = if share.s.nrows() == user.channel.rx_dim() && share.s.ncols() == n {
        // CSI at the AP: S_l = H_l F X already.
        share.s.clone()
    } else if share.s.nrows() == user.channel.tx_dim() && share.s.ncols() == n {
        matmul(user.channel.lifted(), &share.s)
    } else {
        return Err(Error::shape(
            "downlink share",
            (user.channel.rx_dim(), n),
            share.s.shape(),
        ));
    };
    let g = user_g_step(&m, &user.targets, &user.channel, user.num_users, user.weighting)?;
    let (a, p) = user_shares(&g, &user.channel, &user.targets);
    user.g = g;
    Ok(UplinkShare {
        user_id: user.id,
        iteration: share.iteration,
        a,
        p,
    })
}

#[derive(Debug, Clone)]
pub struct ApNode {
    x: ComplexMatrix,
    pilot_gram: PilotGram,
    p_t: f64,
    rho: f64,
    aggregation: Aggregation,
    /// Known channels (CSI at the transmitter), keyed by user id.
    channels: BTreeMap<usize, MimoChannel>,
    pub f: ComplexMatrix,
    pub z: ComplexMatrix,
    pub u: ComplexMatrix,
    pub t: usize,
    inbox: VecDeque<UplinkShare>,
}

/// Residual bookkeeping of one AP round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApRoundSummary {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub power_f: f64,
    pub power_z: f64,
}

impl ApNode {
    pub fn new(
        x: ComplexMatrix,
        p_t: f64,
        rho: f64,
        aggregation: Aggregation,
        channels: BTreeMap<usize, MimoChannel>,
        init: &AdmmState,
    ) -> Result<Self> {
        let pilot_gram = PilotGram::new(&x)?;
        Ok(ApNode {
            x,
            pilot_gram,
            p_t,
            rho,
            aggregation,
            channels,
            f: init.f.clone(),
            z: init.z.clone(),
            u: init.u.clone(),
            t: init.t,
            inbox: VecDeque::new(),
        })
    }

    pub fn has_csi(&self) -> bool {
        !self.channels.is_empty()
    }

    pub fn deliver(&mut self, share: UplinkShare) {
        self.inbox.push_back(share);
    }

    fn drain_inbox(&mut self) -> Vec<UplinkShare> {
        self.inbox.drain(..).collect()
    }
}

/// Registers the requesting users. The CSI flag follows whether the AP holds
/// channel knowledge.
pub fn handshake(ap: &ApNode, requests: &[HandshakeMsg]) -> Result<Session> {
    if requests.is_empty() {
        return Err(Error::invalid("handshake needs at least one user"));
    }
    let mut latent_dims = BTreeMap::new();
    for r in requests {
        if latent_dims.insert(r.user_id, r.latent_dim).is_some() {
            return Err(Error::DuplicateUser(r.user_id));
        }
        if r.pilots != ap.x.ncols() {
            return Err(Error::invalid(format!(
                "user {} offers {} pilots, AP holds {}",
                r.user_id,
                r.pilots,
                ap.x.ncols()
            )));
        }
    }
    let csi = ap.has_csi();
    if csi {
        if let Some(missing) = latent_dims.keys().find(|id| !ap.channels.contains_key(id)) {
            return Err(Error::invalid(format!("AP has no channel for user {missing}")));
        }
    }
    Ok(Session {
        user_ids: latent_dims.keys().copied().collect(),
        latent_dims,
        pilots: ap.x.ncols(),
        csi,
    })
}

/// Downlink shares for iteration `ap.t + 1`, in session order.
pub fn ap_broadcast(ap: &ApNode, session: &Session, ledger: &mut PayloadLedger) -> Vec<DownlinkShare> {
    let t = ap.t + 1;
    let shared = if session.csi {
        None
    } else {
        Some(downlink_signal(None, &ap.f, &ap.x))
    };
    session
        .user_ids
        .iter()
        .map(|&id| {
            let s = match &shared {
                Some(fx) => fx.clone(),
                None => downlink_signal(ap.channels.get(&id), &ap.f, &ap.x),
            };
            let share = DownlinkShare { user_id: id, iteration: t, s };
            ledger.record(t, Direction::Downlink, id, share.payload());
            share
        })
        .collect()
}

/// AP side of one round: local Sylvester solves, aggregation, projection,
/// and dual update. Requires exactly one share per session user; otherwise
/// nothing is modified.
pub fn ap_round(
    ap: &mut ApNode,
    session: &Session,
    mut shares: Vec<UplinkShare>,
    ledger: &mut PayloadLedger,
) -> Result<ApRoundSummary> {
    let t = ap.t + 1;
    shares.sort_by_key(|s| s.user_id);
    for (i, &id) in session.user_ids.iter().enumerate() {
        match shares.get(i) {
            Some(s) if s.user_id == id && s.iteration == t => {}
            _ => return Err(Error::MissingShare { round: t, user_id: id }),
        }
    }
    if shares.len() != session.num_users() {
        return Err(Error::invalid(format!(
            "round {t}: {} shares for {} users",
            shares.len(),
            session.num_users()
        )));
    }
    for s in &shares {
        if hermitian_deviation(&s.a) > 1e-12 * (1.0 + frobenius_sq(&s.a).sqrt()) {
            return Err(Error::invalid(format!("user {} sent a non-Hermitian A_l", s.user_id)));
        }
    }

    let ings = shares
        .iter()
        .map(|s| LocalFIngredients::from_shares(s.a.clone(), &s.p, &ap.x, &ap.pilot_gram, &ap.z, &ap.u, ap.rho))
        .collect::<Result<Vec<_>>>()?;
    let f_new = f_step(&ings, ap.x.ncols(), ap.rho, ap.aggregation)?;
    let z_new = z_update(&f_new, &ap.u, ap.p_t)?;
    let u_new = u_update(&ap.u, &f_new, &z_new);
    ensure_finite(&u_new, &format!("U-step at round {t}"))?;

    for s in &shares {
        ledger.record(t, Direction::Uplink, s.user_id, s.payload());
    }
    let summary = ApRoundSummary {
        primal_residual: frobenius_sq(&(&f_new - &z_new)).sqrt(),
        dual_residual: ap.rho * frobenius_sq(&(&z_new - &ap.z)).sqrt(),
        power_f: frobenius_sq(&f_new),
        power_z: frobenius_sq(&z_new),
    };
    ap.f = f_new;
    ap.z = z_new;
    ap.u = u_new;
    ap.t = t;
    Ok(summary)
}

/// Builds the AP and user nodes for a problem. With `csi` the AP receives
/// every channel; otherwise only users know their channels.
pub fn build_nodes(problem: &AlignmentProblem, init: &AdmmState, aggregation: Aggregation, csi: bool) -> Result<(ApNode, Vec<UserNode>)> {
    let users: Vec<UserNode> = problem
        .targets()
        .iter()
        .zip(problem.channels())
        .enumerate()
        .map(|(l, (y, ch))| UserNode::new(l, y.clone(), ch.clone()))
        .collect();
    let channels = if csi {
        problem.channels().iter().cloned().enumerate().collect()
    } else {
        BTreeMap::new()
    };
    let ap = ApNode::new(problem.x().clone(), problem.p_t(), problem.rho(), aggregation, channels, init)?;
    Ok((ap, users))
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub state: AdmmState,
    pub ledger: PayloadLedger,
    pub session: Session,
}

/// Runs `options.iterations` synchronous rounds.
///
/// `observer` is the simulator's global view of the same problem; it is only
/// used to evaluate the objective for the trace, never by the nodes.
pub fn run_federated(
    ap: &mut ApNode,
    users: &mut [UserNode],
    options: &AdmmOptions,
    observer: &AlignmentProblem,
) -> Result<FederatedRun> {
    if options.iterations == 0 {
        return Err(Error::invalid("iteration count must be at least 1"));
    }
    if options.aggregation != ap.aggregation {
        return Err(Error::invalid("AP aggregation mode differs from the requested options"));
    }
    let requests: Vec<HandshakeMsg> = users.iter().map(UserNode::request).collect();
    let session = handshake(ap, &requests)?;
    for u in users.iter_mut() {
        u.join(&session, options.weighting);
    }

    let mut ledger = PayloadLedger::default();
    let mut trace: Vec<IterationRecord> = Vec::new();
    for _ in 0..options.iterations {
        for share in ap_broadcast(ap, &session, &mut ledger) {
            let user = users
                .iter_mut()
                .find(|u| u.id == share.user_id)
                .ok_or_else(|| Error::invalid(format!("no node for user {}", share.user_id)))?;
            user.deliver(share);
        }
        let replies = users
            .par_iter_mut()
            .map(UserNode::process_inbox)
            .collect::<Result<Vec<_>>>()?;
        for reply in replies.into_iter().flatten() {
            ap.deliver(reply);
        }
        let shares = ap.drain_inbox();
        let summary = ap_round(ap, &session, shares, &mut ledger)?;

        let gs = observer_order(users, observer.num_users());
        let objective = admm::objective_value(observer, &ap.f, &gs, options.weighting)?;
        trace.push(IterationRecord {
            t: ap.t,
            objective,
            primal_residual: summary.primal_residual,
            dual_residual: summary.dual_residual,
            power_f: summary.power_f,
            power_z: summary.power_z,
            lagrangian: None,
        });
        if let Some(tol) = options.stop_tol {
            if summary.primal_residual < tol && summary.dual_residual < tol {
                break;
            }
        }
    }

    let state = AdmmState {
        f: ap.f.clone(),
        z: ap.z.clone(),
        u: ap.u.clone(),
        gs: observer_order(users, observer.num_users()),
        t: ap.t,
        trace,
    };
    Ok(FederatedRun { state, ledger, session })
}

/// Equalizers indexed by user id.
fn observer_order(users: &[UserNode], count: usize) -> Vec<ComplexMatrix> {
    let mut out = vec![ComplexMatrix::zeros(0, 0); count];
    for u in users {
        if u.id < count {
            out[u.id] = u.g.clone();
        }
    }
    out
}

/// Closed-form payload of a full run: downlink `K·N_R·n` per user with CSI
/// (`K·N_T·n` without) and uplink `(K·N_T)² + K·N_T·n`.
pub fn expected_payload(iterations: usize, users: usize, rx_dim: usize, tx_dim: usize, n: usize, csi: bool) -> (usize, usize) {
    let down = if csi { rx_dim * n } else { tx_dim * n };
    let up = tx_dim * tx_dim + tx_dim * n;
    (iterations * users * down, iterations * users * up)
}
