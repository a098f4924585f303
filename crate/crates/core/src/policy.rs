//! Augmentation policies.
//!
//! A [`Stage`] chooses one operation from a pool, a [`Subpolicy`] chains
//! stages, and a [`Policy`] holds several subpolicies of which one is drawn
//! per batch. A [`PolicySet`] is either one shared policy or one policy per
//! class.
//!
//! A discrete policy is just a policy whose stages each hold a single
//! operation, so the same types serve the search (relaxed) and retraining
//! (discrete) phases.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_op, AugContext, AugOpSpec, Mode, Montage, OpKind, OpNoise, SignalBatch};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::estimators::{softmax, RelaxNoise};
use crate::rng::RandomStream;
use crate::{Error, Result};

pub const POLICY_FORMAT_VERSION: u32 = 1;
pub const INITIAL_PROBABILITY: f64 = 0.5;
pub const INITIAL_MAGNITUDE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Uniform subpolicy choice; each stage samples one operation.
    Adda,
    /// Subpolicy sampled from learned weights over all operation sequences.
    Dada,
    /// Uniform subpolicy choice; each stage mixes all operations.
    FasterAa,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Adda => "adda",
            Architecture::Dada => "dada",
            Architecture::FasterAa => "faster_aa",
        }
    }

    fn stage_mode(self) -> StageMode {
        match self {
            Architecture::FasterAa => StageMode::FasterAa,
            _ => StageMode::Adda,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adda" => Ok(Architecture::Adda),
            "dada" => Ok(Architecture::Dada),
            "faster_aa" | "faster-aa" => Ok(Architecture::FasterAa),
            _ => Err(Error::parse("architecture", format!("unknown architecture '{s}'"))),
        }
    }
}

/// How a multi-operation stage is evaluated in relaxed mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMode {
    /// One operation drawn by Gumbel-max; its weight gradient comes from RELAX.
    Adda,
    /// `sum_k softmax(w)_k O_k(X)` over the whole pool.
    FasterAa,
}

/// Hard or relaxed evaluation of a whole policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyMode {
    /// Hard gates, sampled operations; used for training and the CLI.
    Hard,
    /// Relaxed gates and the architecture's stage relaxation; used by the search.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub ops: Vec<OpKind>,
    /// Selection weights.
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    /// Zero for operations without a magnitude.
    pub mu: Vec<f64>,
}

impl Stage {
    /// Uniform selection over `ops` with `p = mu = 0.5`.
    pub fn uniform(ops: &[OpKind]) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::contract("a stage needs at least one operation"));
        }
        for (i, a) in ops.iter().enumerate() {
            if ops[..i].contains(a) {
                return Err(Error::contract(format!("operation {a} listed twice in a stage")));
            }
        }
        Ok(Self {
            ops: ops.to_vec(),
            w: vec![0.0; ops.len()],
            p: vec![INITIAL_PROBABILITY; ops.len()],
            mu: ops
                .iter()
                .map(|k| if k.has_magnitude() { INITIAL_MAGNITUDE } else { 0.0 })
                .collect(),
        })
    }

    pub fn single(spec: AugOpSpec) -> Self {
        Self {
            ops: vec![spec.kind],
            w: vec![0.0],
            p: vec![spec.p],
            mu: vec![if spec.kind.has_magnitude() { spec.mu } else { 0.0 }],
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn spec(&self, i: usize) -> AugOpSpec {
        AugOpSpec {
            kind: self.ops[i],
            p: self.p[i],
            mu: self.mu[i],
            differentiable: self.ops[i].is_differentiable(),
        }
    }

    pub fn selection(&self) -> Vec<f64> {
        softmax(&self.w)
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn best(&self) -> usize {
        argmax(&self.w)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ops.len();
        if n == 0 || self.w.len() != n || self.p.len() != n || self.mu.len() != n {
            return Err(Error::contract("stage vectors must match the operation list"));
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stage weights".into()));
        }
        for i in 0..n {
            self.spec(i).validate()?;
        }
        Ok(())
    }

    /// Clamps `p` and `mu` into `[0, 1]`.
    pub fn project(&mut self) {
        for v in self.p.iter_mut().chain(self.mu.iter_mut()) {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Stages applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Subpolicy {
    pub stages: Vec<Stage>,
}

impl Subpolicy {
    pub fn from_specs(specs: &[AugOpSpec]) -> Self {
        Self {
            stages: specs.iter().map(|s| Stage::single(*s)).collect(),
        }
    }
}

/// Sampling weights over candidate subpolicies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DadaWeights {
    pub weights: Vec<f64>,
    /// Number of candidates kept by [`Policy::discretize`].
    pub keep: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub architecture: Architecture,
    pub subpolicies: Vec<Subpolicy>,
    /// Present exactly when the architecture is DADA.
    pub dada: Option<DadaWeights>,
}

impl Policy {
    /// Fresh relaxed policy over `pool`. For DADA, `n_subpolicies` is the
    /// number of candidates kept when discretizing and the candidates are all
    /// `pool.len()^n_stages` operation sequences.
    pub fn initial(
        architecture: Architecture,
        pool: &[OpKind],
        n_subpolicies: usize,
        n_stages: usize,
    ) -> Result<Self> {
        if n_subpolicies == 0 || n_stages == 0 {
            return Err(Error::contract("need at least one subpolicy and one stage"));
        }
        Stage::uniform(pool)?;
        match architecture {
            Architecture::Adda | Architecture::FasterAa => {
                let sub = Subpolicy {
                    stages: (0..n_stages)
                        .map(|_| Stage::uniform(pool))
                        .collect::<Result<_>>()?,
                };
                Ok(Self {
                    architecture,
                    subpolicies: vec![sub; n_subpolicies],
                    dada: None,
                })
            }
            Architecture::Dada => {
                let n = pool.len();
                let count = n
                    .checked_pow(n_stages as u32)
                    .filter(|&c| c <= 1 << 20)
                    .ok_or_else(|| Error::contract("too many operation sequences for DADA"))?;
                let subpolicies = (0..count)
                    .map(|mut c| {
                        let mut specs = vec![0; n_stages];
                        for s in (0..n_stages).rev() {
                            specs[s] = c % n;
                            c /= n;
                        }
                        Subpolicy {
                            stages: specs
                                .into_iter()
                                .map(|i| {
                                    let mut st = Stage::uniform(&pool[i..i + 1]).expect("non-empty");
                                    st.w[0] = 0.0;
                                    st
                                })
                                .collect(),
                        }
                    })
                    .collect();
                Ok(Self {
                    architecture,
                    subpolicies,
                    dada: Some(DadaWeights {
                        weights: vec![0.0; count],
                        keep: n_subpolicies.min(count),
                    }),
                })
            }
        }
    }

    /// Discrete policy applying the given operation chains.
    pub fn from_specs(subpolicies: &[Vec<AugOpSpec>]) -> Self {
        Self {
            architecture: Architecture::Adda,
            subpolicies: subpolicies.iter().map(|s| Subpolicy::from_specs(s)).collect(),
            dada: None,
        }
    }

    /// The policy that never changes its input.
    pub fn identity() -> Self {
        Self {
            architecture: Architecture::Adda,
            subpolicies: Vec::new(),
            dada: None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.subpolicies.iter().all(|s| s.stages.iter().all(|st| st.len() == 1))
    }

    pub fn validate(&self) -> Result<()> {
        for (l, sub) in self.subpolicies.iter().enumerate() {
            if sub.stages.is_empty() {
                return Err(Error::contract(format!("subpolicy {l} has no stages")));
            }
            for st in &sub.stages {
                st.validate()?;
            }
        }
        match (&self.dada, self.architecture) {
            (Some(d), Architecture::Dada) => {
                if d.weights.len() != self.subpolicies.len() {
                    return Err(Error::contract(format!(
                        "{} DADA weights for {} candidates",
                        d.weights.len(),
                        self.subpolicies.len()
                    )));
                }
                if d.weights.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("DADA weights".into()));
                }
                if d.keep == 0 {
                    return Err(Error::contract("DADA must keep at least one candidate"));
                }
            }
            (None, Architecture::Dada) => return Err(Error::contract("DADA policy without weights")),
            (Some(_), _) => return Err(Error::contract("candidate weights on a non-DADA policy")),
            (None, _) => {}
        }
        Ok(())
    }

    pub fn project(&mut self) {
        for sub in &mut self.subpolicies {
            for st in &mut sub.stages {
                st.project();
            }
        }
    }

    /// Keeps the highest-weight operation of every stage with its learned
    /// `(p, mu)`; DADA keeps its `keep` highest-weight candidates.
    pub fn discretize(&self) -> Policy {
        let collapse = |sub: &Subpolicy| Subpolicy {
            stages: sub
                .stages
                .iter()
                .map(|st| Stage::single(st.spec(st.best())))
                .collect(),
        };
        match &self.dada {
            Some(d) => {
                let mut order: Vec<usize> = (0..d.weights.len()).collect();
                order.sort_by(|&a, &b| d.weights[b].partial_cmp(&d.weights[a]).unwrap().then(a.cmp(&b)));
                order.truncate(d.keep);
                Policy {
                    architecture: Architecture::Dada,
                    subpolicies: order.iter().map(|&i| collapse(&self.subpolicies[i])).collect(),
                    dada: Some(DadaWeights {
                        weights: order.iter().map(|&i| d.weights[i]).collect(),
                        keep: order.len(),
                    }),
                }
            }
            None => Policy {
                architecture: self.architecture,
                subpolicies: self.subpolicies.iter().map(collapse).collect(),
                dada: None,
            },
        }
    }

    fn stages(&self) -> impl Iterator<Item = &Stage> {
        self.subpolicies.iter().flat_map(|s| s.stages.iter())
    }

    fn stages_mut(&mut self) -> impl Iterator<Item = &mut Stage> {
        self.subpolicies.iter_mut().flat_map(|s| s.stages.iter_mut())
    }

    /// Number of entries in [`Policy::params`].
    pub fn n_params(&self) -> usize {
        self.stages().map(|s| 3 * s.len()).sum::<usize>() + self.dada.as_ref().map_or(0, |d| d.weights.len())
    }

    /// All trainable numbers: per stage `w`, `p`, `mu`, then DADA weights.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for st in self.stages() {
            out.extend_from_slice(&st.w);
            out.extend_from_slice(&st.p);
            out.extend_from_slice(&st.mu);
        }
        if let Some(d) = &self.dada {
            out.extend_from_slice(&d.weights);
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::contract(format!(
                "{} values for {} policy parameters",
                values.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &values[at..at + n];
            at += n;
            s.to_vec()
        };
        for st in self.stages_mut() {
            let n = st.len();
            st.w = take(n);
            st.p = take(n);
            st.mu = take(n);
        }
        if let Some(d) = &mut self.dada {
            d.weights = take(d.weights.len());
        }
        Ok(())
    }
}

/// One policy per class, indexed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClasswisePolicy {
    pub per_class: Vec<Policy>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicySet {
    Shared { n_classes: usize, policy: Policy },
    ClassWise(ClasswisePolicy),
}

impl PolicySet {
    pub fn shared(policy: Policy, n_classes: usize) -> Self {
        PolicySet::Shared { n_classes, policy }
    }

    pub fn class_wise(per_class: Vec<Policy>) -> Self {
        PolicySet::ClassWise(ClasswisePolicy { per_class })
    }

    pub fn identity(n_classes: usize) -> Self {
        Self::shared(Policy::identity(), n_classes)
    }

    pub fn is_class_wise(&self) -> bool {
        matches!(self, PolicySet::ClassWise(_))
    }

    pub fn n_classes(&self) -> usize {
        match self {
            PolicySet::Shared { n_classes, .. } => *n_classes,
            PolicySet::ClassWise(c) => c.per_class.len(),
        }
    }

    pub fn policies(&self) -> Vec<&Policy> {
        match self {
            PolicySet::Shared { policy, .. } => vec![policy],
            PolicySet::ClassWise(c) => c.per_class.iter().collect(),
        }
    }

    pub fn policies_mut(&mut self) -> Vec<&mut Policy> {
        match self {
            PolicySet::Shared { policy, .. } => vec![policy],
            PolicySet::ClassWise(c) => c.per_class.iter_mut().collect(),
        }
    }

    /// Policy index that handles `label`.
    pub fn group_of(&self, label: usize) -> Result<usize> {
        match self {
            PolicySet::Shared { .. } => Ok(0),
            PolicySet::ClassWise(c) if label < c.per_class.len() => Ok(label),
            PolicySet::ClassWise(c) => Err(Error::contract(format!(
                "label {label} has no class-wise policy ({} classes)",
                c.per_class.len()
            ))),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.policies()
            .first()
            .map_or(Architecture::Adda, |p| p.architecture)
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture();
        for p in self.policies() {
            if p.architecture != arch {
                return Err(Error::contract("class-wise policies must share one architecture"));
            }
            p.validate()?;
        }
        if self.n_classes() == 0 {
            return Err(Error::contract("need at least one class"));
        }
        Ok(())
    }

    pub fn project(&mut self) {
        for p in self.policies_mut() {
            p.project();
        }
    }

    pub fn discretize(&self) -> PolicySet {
        match self {
            PolicySet::Shared { n_classes, policy } => PolicySet::Shared {
                n_classes: *n_classes,
                policy: policy.discretize(),
            },
            PolicySet::ClassWise(c) => {
                Self::class_wise(c.per_class.iter().map(Policy::discretize).collect())
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.policies().iter().map(|p| p.n_params()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.policies().iter().flat_map(|p| p.params()).collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::contract("policy parameter count mismatch"));
        }
        let mut at = 0;
        for p in self.policies_mut() {
            let n = p.n_params();
            p.set_params(&values[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    /// Softmax mass each stage of each policy puts on `kind`, averaged over
    /// stages and subpolicies; DADA uses candidate weights instead.
    pub fn selection_mass(&self, kind: OpKind) -> Vec<f64> {
        self.policies()
            .iter()
            .map(|p| selection_mass(p, kind))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&to_doc(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicySetDoc =
            serde_json::from_str(text).map_err(|e| Error::parse("policy", e.to_string()))?;
        from_doc(doc)
    }
}

fn selection_mass(p: &Policy, kind: OpKind) -> f64 {
    match &p.dada {
        Some(d) => {
            let probs = softmax(&d.weights);
            let k = p.subpolicies.first().map_or(1, |s| s.stages.len()).max(1) as f64;
            p.subpolicies
                .iter()
                .zip(probs)
                .map(|(s, q)| q * s.stages.iter().filter(|st| st.ops[0] == kind).count() as f64 / k)
                .sum()
        }
        None => {
            let stages: Vec<&Stage> = p.stages().collect();
            if stages.is_empty() {
                return 0.0;
            }
            stages
                .iter()
                .map(|st| {
                    let probs = st.selection();
                    st.ops
                        .iter()
                        .zip(probs)
                        .filter(|(k, _)| **k == kind)
                        .map(|(_, q)| q)
                        .sum::<f64>()
                })
                .sum::<f64>()
                / stages.len() as f64
        }
    }
}

/// `(n_p n_mu n_ops)^(L K n_classes)` exactly.
pub fn policy_space_size(
    n_probabilities: u64,
    n_magnitudes: u64,
    n_ops: u64,
    n_subpolicies: u32,
    n_stages: u32,
    n_classes: u32,
) -> Result<BigUint> {
    if [n_probabilities, n_magnitudes, n_ops].contains(&0) || [n_subpolicies, n_stages, n_classes].contains(&0) {
        return Err(Error::contract("all space-size arguments must be at least 1"));
    }
    let base = BigUint::from(n_probabilities) * n_magnitudes * n_ops;
    let exp = n_subpolicies
        .checked_mul(n_stages)
        .and_then(|v| v.checked_mul(n_classes))
        .ok_or_else(|| Error::contract("space-size exponent overflows"))?;
    Ok(base.pow(exp))
}

// Autodiff binding and application.

/// Tape handles for one stage's parameters.
#[derive(Clone, Copy, Debug)]
pub struct StageVars<'t> {
    pub w: Var<'t>,
    pub p: Var<'t>,
    pub mu: Var<'t>,
    /// Index of this stage's selection weights among the binding's sites.
    pub site: usize,
}

impl<'t> StageVars<'t> {
    pub fn bind(stage: &Stage, tape: &'t Tape, trainable: bool, site: usize) -> Self {
        let make = |v: &[f64]| {
            if trainable {
                tape.leaf(Tensor::vector(v))
            } else {
                tape.constant(Tensor::vector(v))
            }
        };
        Self {
            w: make(&stage.w),
            p: make(&stage.p),
            mu: make(&stage.mu),
            site,
        }
    }
}

/// Location of one categorical weight vector inside the flat parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Site {
    pub offset: usize,
    pub len: usize,
    /// Every operation reachable through this choice has probability zero,
    /// so the loss does not depend on it.
    pub inert: bool,
}

struct GroupVars<'t> {
    stages: Vec<Vec<StageVars<'t>>>,
    dada: Option<(Var<'t>, usize)>,
}

/// All policy parameters of a [`PolicySet`] placed on one tape.
pub struct PolicyBinding<'t> {
    groups: Vec<GroupVars<'t>>,
    sites: Vec<Site>,
    n_params: usize,
}

impl<'t> PolicyBinding<'t> {
    pub fn new(set: &PolicySet, tape: &'t Tape, trainable: bool) -> Self {
        let mut sites = Vec::new();
        let mut offset = 0;
        let mut groups = Vec::new();
        for policy in set.policies() {
            let mut stages = Vec::new();
            for sub in &policy.subpolicies {
                let mut row = Vec::new();
                for st in &sub.stages {
                    sites.push(Site {
                        offset,
                        len: st.len(),
                        inert: st.p.iter().all(|&p| p == 0.0),
                    });
                    row.push(StageVars::bind(st, tape, trainable, sites.len() - 1));
                    offset += 3 * st.len();
                }
                stages.push(row);
            }
            let dada = policy.dada.as_ref().map(|d| {
                let inert = policy
                    .subpolicies
                    .iter()
                    .flat_map(|sub| &sub.stages)
                    .all(|st| st.p.iter().all(|&p| p == 0.0));
                sites.push(Site {
                    offset,
                    len: d.weights.len(),
                    inert,
                });
                offset += d.weights.len();
                let t = Tensor::vector(&d.weights);
                let v = if trainable { tape.leaf(t) } else { tape.constant(t) };
                (v, sites.len() - 1)
            });
            groups.push(GroupVars { stages, dada });
        }
        Self {
            groups,
            sites,
            n_params: offset,
        }
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// Gradient in the layout of [`PolicySet::params`].
    pub fn gradient(&self, grads: &Gradients) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_params);
        for g in &self.groups {
            for row in &g.stages {
                for sv in row {
                    out.extend(grads.get(sv.w)?.into_data());
                    out.extend(grads.get(sv.p)?.into_data());
                    out.extend(grads.get(sv.mu)?.into_data());
                }
            }
            if let Some((v, _)) = g.dada {
                out.extend(grads.get(v)?.into_data());
            }
        }
        Ok(out)
    }
}

/// A categorical draw whose weight gradient must be estimated separately.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceRecord {
    pub site: usize,
    pub weights: Vec<f64>,
    pub noise: RelaxNoise,
    pub choice: usize,
}

pub struct StageOutput<'t> {
    pub out: Var<'t>,
    pub choice: Option<ChoiceRecord>,
    pub ops_evaluated: usize,
}

fn gate_mode(mode: ApplyMode) -> Mode {
    match mode {
        ApplyMode::Hard => Mode::Hard,
        ApplyMode::Relaxed => Mode::Relaxed,
    }
}

fn shape3(x: Var<'_>) -> Result<[usize; 3]> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("expected B x C x T input, got {s:?}")));
    }
    Ok([s[0], s[1], s[2]])
}

fn apply_one<'t>(
    kind: OpKind,
    i: usize,
    vars: &StageVars<'t>,
    x: Var<'t>,
    mode: ApplyMode,
    ctx: &AugContext<'_>,
    rng: &mut RandomStream,
) -> Result<Var<'t>> {
    let noise = OpNoise::draw(kind, shape3(x)?, rng);
    apply_op(
        kind,
        x,
        vars.p.slice(0, i, i + 1),
        vars.mu.slice(0, i, i + 1),
        &noise,
        gate_mode(mode),
        ctx,
    )
}

/// Applies one stage.
///
/// A single-operation stage applies that operation. Otherwise hard mode and
/// the ADDA relaxation draw one operation with Gumbel-max and return the
/// draw; the Faster-AA relaxation evaluates every operation and mixes them
/// with `softmax(w)`.
pub fn stage_forward<'t>(
    stage: &Stage,
    vars: &StageVars<'t>,
    x: Var<'t>,
    mode: ApplyMode,
    stage_mode: StageMode,
    ctx: &AugContext<'_>,
    rng: &mut RandomStream,
) -> Result<StageOutput<'t>> {
    let n = stage.len();
    if n == 1 {
        return Ok(StageOutput {
            out: apply_one(stage.ops[0], 0, vars, x, mode, ctx, rng)?,
            choice: None,
            ops_evaluated: 1,
        });
    }
    if mode == ApplyMode::Relaxed && stage_mode == StageMode::FasterAa {
        let weights = vars.w.softmax();
        let mut acc: Option<Var<'t>> = None;
        for (i, &kind) in stage.ops.iter().enumerate() {
            let y = apply_one(kind, i, vars, x, mode, ctx, rng)?;
            let wi = weights.slice(0, i, i + 1).reshape(&[1, 1, 1]);
            let term = y.mul_bcast(wi);
            acc = Some(match acc {
                Some(a) => a.add(term),
                None => term,
            });
        }
        return Ok(StageOutput {
            out: acc.expect("non-empty stage"),
            choice: None,
            ops_evaluated: n,
        });
    }
    let w = vars.w.tensor().into_data();
    let noise = RelaxNoise::draw(n, rng);
    let k = noise.choice(&w);
    let out = apply_one(stage.ops[k], k, vars, x, mode, ctx, rng)?;
    let choice = (mode == ApplyMode::Relaxed).then(|| ChoiceRecord {
        site: vars.site,
        weights: w,
        noise,
        choice: k,
    });
    Ok(StageOutput {
        out,
        choice,
        ops_evaluated: 1,
    })
}

/// Output of [`apply_bound`].
pub struct Applied<'t> {
    pub out: Var<'t>,
    pub choices: Vec<ChoiceRecord>,
    pub ops_evaluated: usize,
}

fn apply_group<'t>(
    policy: &Policy,
    vars: &GroupVars<'t>,
    x: Var<'t>,
    mode: ApplyMode,
    ctx: &AugContext<'_>,
    rng: &mut RandomStream,
    applied: &mut Applied<'t>,
) -> Result<Var<'t>> {
    let l = policy.subpolicies.len();
    if l == 0 {
        return Ok(x);
    }
    let pick = match (&policy.dada, vars.dada) {
        (Some(d), Some((_, site))) => {
            let noise = RelaxNoise::draw(l, rng);
            let k = noise.choice(&d.weights);
            if mode == ApplyMode::Relaxed {
                applied.choices.push(ChoiceRecord {
                    site,
                    weights: d.weights.clone(),
                    noise,
                    choice: k,
                });
            }
            k
        }
        _ if l == 1 => 0,
        _ => rng.below(l),
    };
    let stage_mode = policy.architecture.stage_mode();
    let mut y = x;
    for (st, sv) in policy.subpolicies[pick].stages.iter().zip(&vars.stages[pick]) {
        let o = stage_forward(st, sv, y, mode, stage_mode, ctx, rng)?;
        y = o.out;
        applied.ops_evaluated += o.ops_evaluated;
        applied.choices.extend(o.choice);
    }
    Ok(y)
}

/// Applies a bound policy set to `x` (`B x C x T`).
///
/// One subpolicy is drawn per batch for a shared policy, and per class for a
/// class-wise one; each class's examples go through their class's draw.
pub fn apply_bound<'t>(
    set: &PolicySet,
    binding: &PolicyBinding<'t>,
    x: Var<'t>,
    labels: &[usize],
    mode: ApplyMode,
    ctx: &AugContext<'_>,
    rng: &mut RandomStream,
) -> Result<Applied<'t>> {
    let [b, _, _] = shape3(x)?;
    if labels.len() != b {
        return Err(Error::contract(format!("{} labels for {b} examples", labels.len())));
    }
    let policies = set.policies();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); policies.len()];
    for (i, &y) in labels.iter().enumerate() {
        members[set.group_of(y)?].push(i);
    }
    let mut applied = Applied {
        out: x,
        choices: Vec::new(),
        ops_evaluated: 0,
    };
    if let Some(g) = members.iter().position(|m| m.len() == b) {
        applied.out = apply_group(policies[g], &binding.groups[g], x, mode, ctx, rng, &mut applied)?;
        return Ok(applied);
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(b);
    for (g, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xs = x.index_select(rows);
        parts.push(apply_group(policies[g], &binding.groups[g], xs, mode, ctx, rng, &mut applied)?);
        order.extend_from_slice(rows);
    }
    let mut inverse = vec![0; b];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    applied.out = Var::concat(&parts, 0).index_select(&inverse);
    Ok(applied)
}

/// Hard-mode augmentation of a batch by a policy set.
pub fn apply_policy(
    set: &PolicySet,
    batch: &SignalBatch,
    montage: Option<&Montage>,
    rng: &mut RandomStream,
) -> Result<SignalBatch> {
    batch.validate()?;
    let tape = Tape::new();
    let binding = PolicyBinding::new(set, &tape, false);
    let ctx = AugContext::new(batch.sfreq, montage);
    let x = tape.constant(batch.data.clone());
    let applied = apply_bound(set, &binding, x, &batch.labels, ApplyMode::Hard, &ctx, rng)?;
    Ok(SignalBatch {
        data: applied.out.tensor(),
        sfreq: batch.sfreq,
        labels: batch.labels.clone(),
    })
}

// Text format.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OpDoc {
    kind: String,
    p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StageDoc {
    Single(OpDoc),
    Pool { ops: Vec<OpDoc>, w: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    subpolicies: Vec<Vec<StageDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dada: Option<DadaWeights>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicySetDoc {
    version: u32,
    architecture: String,
    n_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subpolicies: Option<Vec<Vec<StageDoc>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dada: Option<DadaWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_class: Option<BTreeMap<String, PolicyDoc>>,
}

fn op_doc(st: &Stage, i: usize) -> OpDoc {
    OpDoc {
        kind: st.ops[i].name().to_string(),
        p: st.p[i],
        mu: st.ops[i].has_magnitude().then_some(st.mu[i]),
    }
}

fn policy_doc(p: &Policy) -> PolicyDoc {
    PolicyDoc {
        subpolicies: p
            .subpolicies
            .iter()
            .map(|sub| {
                sub.stages
                    .iter()
                    .map(|st| {
                        if st.len() == 1 && st.w[0] == 0.0 {
                            StageDoc::Single(op_doc(st, 0))
                        } else {
                            StageDoc::Pool {
                                ops: (0..st.len()).map(|i| op_doc(st, i)).collect(),
                                w: st.w.clone(),
                            }
                        }
                    })
                    .collect()
            })
            .collect(),
        dada: p.dada.clone(),
    }
}

fn to_doc(set: &PolicySet) -> PolicySetDoc {
    let mut doc = PolicySetDoc {
        version: POLICY_FORMAT_VERSION,
        architecture: set.architecture().name().to_string(),
        n_classes: set.n_classes(),
        subpolicies: None,
        dada: None,
        per_class: None,
    };
    match set {
        PolicySet::Shared { policy, .. } => {
            let d = policy_doc(policy);
            doc.subpolicies = Some(d.subpolicies);
            doc.dada = d.dada;
        }
        PolicySet::ClassWise(c) => {
            doc.per_class = Some(
                c.per_class
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i.to_string(), policy_doc(p)))
                    .collect(),
            );
        }
    }
    doc
}

fn parse_op(doc: &OpDoc, field: &str) -> Result<(OpKind, f64, f64)> {
    let kind: OpKind = doc
        .kind
        .parse()
        .map_err(|_| Error::parse(format!("{field}.kind"), format!("unknown operation kind '{}'", doc.kind)))?;
    if !(0.0..=1.0).contains(&doc.p) {
        return Err(Error::parse(format!("{field}.p"), format!("{} outside [0, 1]", doc.p)));
    }
    let mu = match (kind.has_magnitude(), doc.mu) {
        (true, Some(m)) if (0.0..=1.0).contains(&m) => m,
        (true, Some(m)) => {
            return Err(Error::parse(format!("{field}.mu"), format!("{m} outside [0, 1]")));
        }
        (true, None) => return Err(Error::parse(format!("{field}.mu"), format!("{kind} needs a magnitude"))),
        (false, Some(_)) => {
            return Err(Error::parse(format!("{field}.mu"), format!("{kind} takes no magnitude")));
        }
        (false, None) => 0.0,
    };
    Ok((kind, doc.p, mu))
}

fn parse_policy(arch: Architecture, doc: PolicyDoc, field: &str) -> Result<Policy> {
    let mut subpolicies = Vec::new();
    for (l, sub) in doc.subpolicies.iter().enumerate() {
        let mut stages = Vec::new();
        for (k, st) in sub.iter().enumerate() {
            let at = format!("{field}subpolicies[{l}][{k}]");
            let stage = match st {
                StageDoc::Single(op) => {
                    let (kind, p, mu) = parse_op(op, &at)?;
                    Stage {
                        ops: vec![kind],
                        w: vec![0.0],
                        p: vec![p],
                        mu: vec![mu],
                    }
                }
                StageDoc::Pool { ops, w } => {
                    if ops.len() != w.len() || ops.is_empty() {
                        return Err(Error::parse(format!("{at}.w"), "one weight per operation required"));
                    }
                    let mut stage = Stage {
                        ops: Vec::new(),
                        w: w.clone(),
                        p: Vec::new(),
                        mu: Vec::new(),
                    };
                    for (i, op) in ops.iter().enumerate() {
                        let (kind, p, mu) = parse_op(op, &format!("{at}.ops[{i}]"))?;
                        stage.ops.push(kind);
                        stage.p.push(p);
                        stage.mu.push(mu);
                    }
                    stage
                }
            };
            stage.validate().map_err(|e| Error::parse(at.clone(), e.to_string()))?;
            stages.push(stage);
        }
        if stages.is_empty() {
            return Err(Error::parse(format!("{field}subpolicies[{l}]"), "subpolicy has no stages"));
        }
        subpolicies.push(Subpolicy { stages });
    }
    let policy = Policy {
        architecture: arch,
        subpolicies,
        dada: doc.dada,
    };
    policy
        .validate()
        .map_err(|e| Error::parse(format!("{field}dada"), e.to_string()))?;
    Ok(policy)
}

fn from_doc(doc: PolicySetDoc) -> Result<PolicySet> {
    if doc.version != POLICY_FORMAT_VERSION {
        return Err(Error::parse("version", format!("unsupported version {}", doc.version)));
    }
    let arch: Architecture = doc.architecture.parse()?;
    if doc.n_classes == 0 {
        return Err(Error::parse("n_classes", "must be at least 1"));
    }
    match (doc.subpolicies, doc.per_class) {
        (Some(subpolicies), None) => {
            let policy = parse_policy(
                arch,
                PolicyDoc {
                    subpolicies,
                    dada: doc.dada,
                },
                "",
            )?;
            Ok(PolicySet::shared(policy, doc.n_classes))
        }
        (None, Some(mut per_class)) => {
            if doc.dada.is_some() {
                return Err(Error::parse("dada", "class-wise DADA weights belong inside per_class"));
            }
            let mut policies = Vec::with_capacity(doc.n_classes);
            for c in 0..doc.n_classes {
                let entry = per_class
                    .remove(&c.to_string())
                    .ok_or_else(|| Error::parse(format!("per_class.{c}"), "missing class entry"))?;
                policies.push(parse_policy(arch, entry, &format!("per_class.{c}."))?);
            }
            if let Some(extra) = per_class.keys().next() {
                return Err(Error::parse(
                    format!("per_class.{extra}"),
                    format!("class outside 0..{}", doc.n_classes),
                ));
            }
            Ok(PolicySet::class_wise(policies))
        }
        _ => Err(Error::parse(
            "subpolicies",
            "exactly one of 'subpolicies' and 'per_class' must be present",
        )),
    }
}
