//! In-process federated protocols with explicit messages and exact float
//! accounting.
//!
//! Raw rows live only inside [`SimClient`]; the [`Payload`] type can carry
//! moments, parameters and counts, nothing row-shaped. The server processes
//! clients in id order, so every run is deterministic.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::impute::{optimal_map, second_moment_floats, ImputationMap, ImputerKind};
use crate::linalg::{self, Inversion};
use crate::model::{CommDirection, CommLog, Dataset, FeaturePattern, MaskedSample, MomentPair};
use crate::moments::{aggregate, LocalStats, MomentPayload, PAYLOAD_LAYOUT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProtocolKind {
    /// Every client uploads its zero-imputed sums once; the server broadcasts
    /// the component-wise pair.
    OneShotMoments,
    /// Clients upload sums of their imputed rows once; the server solves
    /// ridge and broadcasts θ.
    OneShotRidge { lambda: f64 },
    FederatedIce { rounds: usize },
    FedAvgRidge {
        lambda: f64,
        rounds: usize,
        local_steps: usize,
        step_size: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub layout_version: u32,
}

impl ProtocolSpec {
    pub fn new(kind: ProtocolKind) -> Self {
        ProtocolSpec {
            kind,
            layout_version: PAYLOAD_LAYOUT_VERSION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout_version != PAYLOAD_LAYOUT_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported payload layout version {}",
                self.layout_version
            )));
        }
        match self.kind {
            ProtocolKind::OneShotMoments | ProtocolKind::FederatedIce { .. } => Ok(()),
            ProtocolKind::OneShotRidge { lambda } => check_lambda(lambda),
            ProtocolKind::FedAvgRidge {
                lambda,
                rounds,
                local_steps,
                step_size,
            } => {
                check_lambda(lambda)?;
                if rounds == 0 {
                    return Err(Error::param("rounds", "must be >= 1"));
                }
                if local_steps == 0 {
                    return Err(Error::param("local_steps", "must be >= 1"));
                }
                if !(step_size > 0.0) {
                    return Err(Error::param("step_size", "must be > 0"));
                }
                Ok(())
            }
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param("lambda", "must be finite and >= 0"));
    }
    Ok(())
}

/// Everything a message may carry.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Pattern bitmask and sample count; accounted in bits, not floats.
    Registration { pattern_words: Vec<u64>, n: u64 },
    Moments(MomentPayload),
    /// Packed upper triangle of a second-moment sum.
    SecondMoment { upper: Vec<f64> },
    /// Packed upper triangle plus, optionally, a `d`-vector.
    Broadcast { upper: Vec<f64>, vector: Option<Vec<f64>> },
    Parameters(Vec<f64>),
}

impl Payload {
    pub fn float_count(&self) -> u64 {
        match self {
            Payload::Registration { .. } => 0,
            Payload::Moments(p) => p.float_count(),
            Payload::SecondMoment { upper } => upper.len() as u64,
            Payload::Broadcast { upper, vector } => (upper.len() + vector.as_ref().map_or(0, Vec::len)) as u64,
            Payload::Parameters(v) => v.len() as u64,
        }
    }
}

/// Bits in one registration message: the pattern bitmask plus a 64-bit count.
pub fn registration_bits(d: usize) -> u64 {
    d as u64 + 64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Server,
    Client(usize),
    /// All clients at once.
    Broadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub payload: Payload,
}

/// Ordered record of every message and the float/bit totals derived from it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub messages: Vec<Message>,
    pub comm: CommLog,
}

impl Transcript {
    fn send(&mut self, round: usize, from: Endpoint, to: Endpoint, payload: Payload, description: &str) {
        match &payload {
            Payload::Registration { .. } => {}
            p => {
                let direction = if from == Endpoint::Server {
                    CommDirection::Down
                } else {
                    CommDirection::Up
                };
                self.comm.record(round, direction, p.float_count(), description);
            }
        }
        self.messages.push(Message { round, from, to, payload });
    }
}

/// A client: its pattern and its private samples.
#[derive(Debug, Clone)]
pub struct SimClient {
    id: usize,
    pattern: FeaturePattern,
    samples: Vec<MaskedSample>,
    imputer: Option<ImputationMap>,
    /// Current imputed rows, in canonical order (ICE, ridge protocols).
    imputed: Option<DMatrix<f64>>,
    y: DVector<f64>,
}

fn canonical_order(samples: &[MaskedSample]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| {
        for (x, y) in samples[a].x_obs.iter().zip(&samples[b].x_obs) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });
    idx
}

impl SimClient {
    pub fn new(id: usize, pattern: FeaturePattern, samples: Vec<MaskedSample>) -> Result<Self> {
        for s in &samples {
            if s.client_id != id || s.x_obs.len() != pattern.len() {
                return Err(Error::Protocol(format!("sample does not belong to client {id}")));
            }
        }
        let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.y));
        Ok(SimClient {
            id,
            pattern,
            samples,
            imputer: None,
            imputed: None,
            y,
        })
    }

    /// One client per federation member, holding its own samples in
    /// dataset order.
    pub fn from_dataset(dataset: &Dataset) -> Result<Vec<SimClient>> {
        dataset
            .indices_by_client()
            .into_iter()
            .map(|(id, idx)| {
                let pattern = dataset.federation().get(id)?.pattern.clone();
                SimClient::new(id, pattern, idx.iter().map(|&i| dataset.samples()[i].clone()).collect())
            })
            .collect()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn pattern(&self) -> &FeaturePattern {
        &self.pattern
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    fn register(&self) -> Payload {
        Payload::Registration {
            pattern_words: self.pattern.mask_words(),
            n: self.n() as u64,
        }
    }

    fn zero_imputed_upload(&self) -> Payload {
        let mut stats = LocalStats::zeros(self.pattern.clone());
        for s in &self.samples {
            stats.push(&s.x_obs, s.y);
        }
        Payload::Moments(stats.to_payload())
    }

    fn set_imputer(&mut self, map: ImputationMap) -> Result<()> {
        let d = self.pattern.dim();
        let order = canonical_order(&self.samples);
        let mut rows = DMatrix::zeros(order.len(), d);
        for (r, &i) in order.iter().enumerate() {
            let row = map.impute_row(self.id, &self.samples[i].x_obs)?;
            rows.set_row(r, &row.transpose());
        }
        self.y = DVector::from_iterator(order.len(), order.iter().map(|&i| self.samples[i].y));
        self.imputed = Some(rows);
        self.imputer = Some(map);
        Ok(())
    }

    fn rows(&self) -> Result<&DMatrix<f64>> {
        self.imputed
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {} has no imputer", self.id)))
    }

    fn imputed_upload(&self) -> Result<Payload> {
        let rows = self.rows()?;
        let xx = rows.tr_mul(rows);
        let xy = rows.tr_mul(&self.y);
        Ok(Payload::Moments(MomentPayload {
            version: PAYLOAD_LAYOUT_VERSION,
            n: self.n() as f64,
            xx_upper: linalg::upper_tri(&linalg::symmetrize(&xx)),
            xy: xy.as_slice().to_vec(),
            pattern_tag: self.pattern.tag(),
        }))
    }

    fn second_moment_upload(&self) -> Result<Payload> {
        let rows = self.rows()?;
        Ok(Payload::SecondMoment {
            upper: linalg::upper_tri(&linalg::symmetrize(&rows.tr_mul(rows))),
        })
    }

    fn ice_update(&mut self, upper: &[f64], inversion: Inversion) -> Result<()> {
        let sigma = linalg::from_upper_tri(self.pattern.dim(), upper)?;
        let (s, _) = optimal_map(&sigma, &self.pattern, inversion)?;
        let rows = self.imputed.as_mut().ok_or_else(|| Error::Protocol("ICE before imputation".into()))?;
        let order = canonical_order(&self.samples);
        let obs = self.pattern.observed();
        let mis = self.pattern.missing();
        for (r, &i) in order.iter().enumerate() {
            let x = &self.samples[i].x_obs;
            for (a, &j) in mis.iter().enumerate() {
                let mut acc = 0.0;
                for (b, v) in x.iter().enumerate() {
                    acc += s[(a, b)] * v;
                }
                rows[(r, j)] = acc;
            }
            for (b, &j) in obs.iter().enumerate() {
                rows[(r, j)] = x[b];
            }
        }
        Ok(())
    }

    fn local_fedavg(&self, theta: &[f64], lambda: f64, steps: usize, step: f64) -> Result<Payload> {
        let mut t = DVector::from_column_slice(theta);
        if self.n() > 0 {
            let rows = self.rows()?;
            let inv = 1.0 / self.n() as f64;
            let sigma = linalg::symmetrize(&rows.tr_mul(rows)) * inv;
            let gamma = rows.tr_mul(&self.y) * inv;
            for _ in 0..steps {
                let grad = &sigma * &t - &gamma + &t * lambda;
                t -= grad * step;
            }
        }
        Ok(Payload::Parameters(t.as_slice().to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServerConfig {
    pub inversion: Inversion,
    /// Imputer the clients apply before the ridge and ICE protocols; the
    /// zero imputer when absent.
    pub imputer: Option<ImputationMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolResult {
    Moments { zero_imputed: MomentPair, component_wise: MomentPair },
    Ridge { theta: DVector<f64> },
    Ice { map: ImputationMap, sigma_trace: Vec<DMatrix<f64>> },
    FedAvg { theta: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    /// The artifact, or the failure that stopped the protocol.
    pub result: Result<ProtocolResult>,
    pub transcript: Transcript,
}

impl ProtocolRun {
    pub fn comm(&self) -> &CommLog {
        &self.transcript.comm
    }
}

/// Execute a protocol. Clients are consumed in id order.
pub fn run_protocol(spec: &ProtocolSpec, clients: &mut [SimClient], cfg: &ServerConfig) -> ProtocolRun {
    let mut transcript = Transcript::default();
    let result = execute(spec, clients, cfg, &mut transcript);
    ProtocolRun { result, transcript }
}

fn execute(spec: &ProtocolSpec, clients: &mut [SimClient], cfg: &ServerConfig, tr: &mut Transcript) -> Result<ProtocolResult> {
    spec.validate()?;
    cfg.inversion.validate()?;
    clients.sort_by_key(|c| c.id);
    let first = clients.first().ok_or_else(|| Error::Protocol("no clients".into()))?;
    let d = first.pattern.dim();
    if clients.iter().any(|c| c.pattern.dim() != d) {
        return Err(Error::Protocol("clients disagree on the feature dimension".into()));
    }
    if clients.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Protocol("duplicate client id".into()));
    }

    // Registration.
    let mut counts = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        let payload = c.register();
        if let Payload::Registration { n, .. } = payload {
            counts.push(n);
        }
        tr.send(0, Endpoint::Client(c.id), Endpoint::Server, payload, "registration");
        tr.comm.record_registration(registration_bits(d));
    }
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }

    match spec.kind {
        ProtocolKind::OneShotMoments => {
            let mut locals = Vec::with_capacity(clients.len());
            for c in clients.iter() {
                let payload = c.zero_imputed_upload();
                if let Payload::Moments(p) = &payload {
                    locals.push(p.decode(&c.pattern)?);
                }
                tr.send(1, Endpoint::Client(c.id), Endpoint::Server, payload, "zero-imputed sums");
            }
            let agg = aggregate(&locals)?;
            let zero = agg.zero_imputed()?;
            let cw = agg.component_wise()?;
            tr.send(
                1,
                Endpoint::Server,
                Endpoint::Broadcast,
                Payload::Broadcast {
                    upper: linalg::upper_tri(cw.sigma()),
                    vector: Some(cw.gamma().as_slice().to_vec()),
                },
                "component-wise moments",
            );
            Ok(ProtocolResult::Moments {
                zero_imputed: zero,
                component_wise: cw,
            })
        }
        ProtocolKind::OneShotRidge { lambda } => {
            distribute_imputer(clients, cfg)?;
            let mut xx = DMatrix::zeros(d, d);
            let mut xy = DVector::zeros(d);
            for c in clients.iter() {
                let payload = c.imputed_upload()?;
                if let Payload::Moments(p) = &payload {
                    let stats = p.decode(&c.pattern)?;
                    xx += stats.xx_sum;
                    xy += stats.xy_sum;
                }
                tr.send(1, Endpoint::Client(c.id), Endpoint::Server, payload, "imputed sums");
            }
            let inv = 1.0 / n as f64;
            let theta = linalg::ridge_solve(&(xx * inv), &(xy * inv), lambda)?.x;
            tr.send(
                1,
                Endpoint::Server,
                Endpoint::Broadcast,
                Payload::Parameters(theta.as_slice().to_vec()),
                "ridge coefficients",
            );
            Ok(ProtocolResult::Ridge { theta })
        }
        ProtocolKind::FederatedIce { rounds } => {
            let init = distribute_imputer(clients, cfg)?;
            let mut map = init;
            let mut trace = Vec::with_capacity(rounds);
            for round in 1..=rounds {
                let mut total = DMatrix::zeros(d, d);
                for c in clients.iter() {
                    let payload = c.second_moment_upload()?;
                    if let Payload::SecondMoment { upper } = &payload {
                        total += linalg::from_upper_tri(d, upper)?;
                    }
                    tr.send(round, Endpoint::Client(c.id), Endpoint::Server, payload, "imputed second-moment sums");
                }
                let sigma_t = linalg::symmetrize(&total) * (1.0 / n as f64);
                let upper = linalg::upper_tri(&sigma_t);
                tr.send(
                    round,
                    Endpoint::Server,
                    Endpoint::Broadcast,
                    Payload::Broadcast {
                        upper: upper.clone(),
                        vector: None,
                    },
                    "second-moment broadcast",
                );
                clients
                    .par_iter_mut()
                    .try_for_each(|c| c.ice_update(&upper, cfg.inversion))?;
                map = ImputationMap::for_clients(
                    ImputerKind::Ice { round },
                    Some(sigma_t.clone()),
                    clients.iter().map(|c| (c.id, &c.pattern)),
                    cfg.inversion,
                )?;
                trace.push(sigma_t);
            }
            Ok(ProtocolResult::Ice { map, sigma_trace: trace })
        }
        ProtocolKind::FedAvgRidge {
            lambda,
            rounds,
            local_steps,
            step_size,
        } => {
            distribute_imputer(clients, cfg)?;
            let mut theta = DVector::zeros(d);
            let nf = n as f64;
            for round in 1..=rounds {
                for c in clients.iter() {
                    tr.send(
                        round,
                        Endpoint::Server,
                        Endpoint::Client(c.id),
                        Payload::Parameters(theta.as_slice().to_vec()),
                        "global parameters",
                    );
                }
                let uploads: Vec<Payload> = clients
                    .par_iter()
                    .map(|c| c.local_fedavg(theta.as_slice(), lambda, local_steps, step_size))
                    .collect::<Result<_>>()?;
                let mut next = DVector::zeros(d);
                for ((c, payload), &nk) in clients.iter().zip(uploads).zip(&counts) {
                    if let Payload::Parameters(t) = &payload {
                        next += DVector::from_column_slice(t) * (nk as f64 / nf);
                    }
                    tr.send(round, Endpoint::Client(c.id), Endpoint::Server, payload, "local parameters");
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("FedAvg diverged in round {round}")));
                }
                theta = next;
            }
            Ok(ProtocolResult::FedAvg { theta })
        }
    }
}

fn distribute_imputer(clients: &mut [SimClient], cfg: &ServerConfig) -> Result<ImputationMap> {
    let mut map = match &cfg.imputer {
        Some(m) => m.clone(),
        None => ImputationMap::for_clients(
            ImputerKind::Zero,
            None,
            clients.iter().map(|c| (c.id, &c.pattern)),
            cfg.inversion,
        )?,
    };
    for c in clients.iter() {
        if map.get(c.id).is_err() {
            map.extend(c.id, &c.pattern)?;
        }
    }
    clients.par_iter_mut().try_for_each(|c| c.set_imputer(map.clone()))?;
    Ok(map)
}

/// Closed-form float totals of a protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommTotals {
    pub up: u64,
    pub down: u64,
    pub registration_bits: u64,
}

impl CommTotals {
    pub fn total(&self) -> u64 {
        self.up + self.down
    }

    pub fn of(log: &CommLog) -> Self {
        CommTotals {
            up: log.total_up(),
            down: log.total_down(),
            registration_bits: log.registration_bits(),
        }
    }
}

/// Predicted communication of `spec` with `k` clients in dimension `d`.
pub fn replay_comm_schedule(spec: &ProtocolSpec, k: usize, d: usize) -> CommTotals {
    let k = k as u64;
    let dd = d as u64;
    let tri = second_moment_floats(d);
    let (up, down) = match spec.kind {
        ProtocolKind::OneShotMoments => (k * MomentPayload::floats_for_dim(d), tri + dd),
        ProtocolKind::OneShotRidge { .. } => (k * MomentPayload::floats_for_dim(d), dd),
        ProtocolKind::FederatedIce { rounds } => (rounds as u64 * k * tri, rounds as u64 * tri),
        ProtocolKind::FedAvgRidge { rounds, .. } => (k * dd * rounds as u64, k * dd * rounds as u64),
    };
    CommTotals {
        up,
        down,
        registration_bits: k * registration_bits(d),
    }
}
