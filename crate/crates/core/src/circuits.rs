//! Gadgets, ExRecs and FT-GKP circuits built from qubit circuits, with Pauli
//! frame tracking and an exact trajectory simulator over SSS states.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::Rng;

use crate::error::{Result, SimError};
use crate::faultmc::{LocKind, NoiseAssignment};
use crate::gates::{apply_displacement, apply_gate, GateKind};
use crate::measurement::{homodyne_branches, homodyne_distribution, sample_homodyne, to_p_frame, Basis, HomodyneSample, Quadrature};
use crate::states::{make_s_state_unchecked, EnvelopeSpec, LogicalTarget};
use crate::zakcore::{qubit, GridSpec, Label, MixedState, Qubit2, SssState, SQRT_PI};

const MARGIN_SNAP: f64 = 1e-12;

// ---------------------------------------------------------------- qubit level

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QubitOp {
    Prep(LogicalTarget),
    X,
    Z,
    H,
    S,
    T,
    Cnot,
    Wait,
    Measure(Basis),
}

impl QubitOp {
    pub fn arity(&self) -> usize {
        if *self == QubitOp::Cnot {
            2
        } else {
            1
        }
    }

    fn text(&self) -> String {
        match self {
            QubitOp::Prep(LogicalTarget::Zero) => "prep target=0".into(),
            QubitOp::Prep(LogicalTarget::Y) => "prep target=y".into(),
            QubitOp::Prep(LogicalTarget::PiOver8) => "prep target=pi8".into(),
            QubitOp::Prep(LogicalTarget::General(..)) => "prep target=general".into(),
            QubitOp::X => "x".into(),
            QubitOp::Z => "z".into(),
            QubitOp::H => "h".into(),
            QubitOp::S => "s".into(),
            QubitOp::T => "t".into(),
            QubitOp::Cnot => "cnot".into(),
            QubitOp::Wait => "i".into(),
            QubitOp::Measure(Basis::Z) => "measure basis=z".into(),
            QubitOp::Measure(Basis::X) => "measure basis=x".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub step: usize,
    pub qubits: Vec<usize>,
    pub op: QubitOp,
}

/// Qubit circuit of width `width` and depth `depth`; locations are kept in
/// chronological order.
#[derive(Clone, Debug, PartialEq)]
pub struct QubitCircuit {
    pub width: usize,
    pub depth: usize,
    pub locations: Vec<Location>,
}

fn parse_target(v: &str) -> Result<LogicalTarget> {
    match v {
        "0" | "zero" => Ok(LogicalTarget::Zero),
        "y" | "Y" => Ok(LogicalTarget::Y),
        "pi8" | "pi/8" | "a" => Ok(LogicalTarget::PiOver8),
        _ => Err(SimError::Format(format!("unknown preparation target '{v}'"))),
    }
}

fn parse_basis(v: &str) -> Result<Basis> {
    match v {
        "z" | "Z" => Ok(Basis::Z),
        "x" | "X" => Ok(Basis::X),
        _ => Err(SimError::Format(format!("unknown basis '{v}'"))),
    }
}

impl QubitCircuit {
    /// Parse `t=<step> q=<i>[,<j>] op=<name> [key=value ...]` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut locations = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| SimError::Format(format!("line {}: {m}", no + 1));
            let mut kv = BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{tok}'")))?;
                if kv.insert(k, v).is_some() {
                    return Err(err(format!("duplicate key '{k}'")));
                }
            }
            let step: usize = kv
                .remove("t")
                .ok_or_else(|| err("missing t=".into()))?
                .parse()
                .map_err(|_| err("bad step".into()))?;
            let qubits = kv
                .remove("q")
                .ok_or_else(|| err("missing q=".into()))?
                .split(',')
                .map(|s| s.parse::<usize>().map_err(|_| err(format!("bad qubit index '{s}'"))))
                .collect::<Result<Vec<_>>>()?;
            let name = kv.remove("op").ok_or_else(|| err("missing op=".into()))?;
            let op = match name.to_ascii_lowercase().as_str() {
                "prep" => parse_target(kv.remove("target").unwrap_or("0"))?,
                "prep0" => LogicalTarget::Zero,
                "prep_y" | "prepy" => LogicalTarget::Y,
                "prep_pi8" | "prepa" => LogicalTarget::PiOver8,
                _ => LogicalTarget::General(C64::new(0.0, 0.0), C64::new(0.0, 0.0)),
            };
            let op = match name.to_ascii_lowercase().as_str() {
                "prep" | "prep0" | "prep_y" | "prepy" | "prep_pi8" | "prepa" => QubitOp::Prep(op),
                "x" => QubitOp::X,
                "z" => QubitOp::Z,
                "h" => QubitOp::H,
                "s" => QubitOp::S,
                "t" => QubitOp::T,
                "cnot" | "cx" | "sum" => QubitOp::Cnot,
                "i" | "id" | "wait" => QubitOp::Wait,
                "measure" | "meas" => QubitOp::Measure(parse_basis(kv.remove("basis").unwrap_or("z"))?),
                "mz" => QubitOp::Measure(Basis::Z),
                "mx" => QubitOp::Measure(Basis::X),
                other => return Err(SimError::UnsupportedGate(other.to_string())),
            };
            if let Some(k) = kv.keys().next() {
                return Err(err(format!("unknown parameter '{k}'")));
            }
            locations.push(Location { step, qubits, op });
        }
        let width = locations.iter().flat_map(|l| l.qubits.iter()).max().map_or(0, |m| m + 1);
        let depth = locations.iter().map(|l| l.step).max().map_or(0, |m| m + 1);
        locations.sort_by_key(|l| (l.step, l.qubits[0]));
        let qc = Self { width, depth, locations };
        qc.validate()?;
        Ok(qc)
    }

    /// Every qubit sits in exactly one location per step, starts with a
    /// preparation at step 0, and is measured only at the last step.
    pub fn validate(&self) -> Result<()> {
        let mut occ = vec![vec![false; self.width]; self.depth];
        for l in &self.locations {
            let bad = |m: &str| Err(SimError::Format(format!("t={} q={:?}: {m}", l.step, l.qubits)));
            if l.qubits.len() != l.op.arity() {
                return bad("wrong number of qubits");
            }
            if l.qubits.len() == 2 && l.qubits[0] == l.qubits[1] {
                return bad("control equals target");
            }
            if l.step >= self.depth || l.qubits.iter().any(|q| *q >= self.width) {
                return bad("out of range");
            }
            if matches!(l.op, QubitOp::Prep(LogicalTarget::General(..))) {
                return bad("unsupported preparation target");
            }
            if matches!(l.op, QubitOp::Prep(_)) != (l.step == 0) {
                return bad("preparations exactly at step 0");
            }
            if matches!(l.op, QubitOp::Measure(_)) && l.step + 1 != self.depth {
                return bad("measurements only at the last step");
            }
            for q in &l.qubits {
                if occ[l.step][*q] {
                    return bad("qubit used twice in one step");
                }
                occ[l.step][*q] = true;
            }
        }
        for (t, row) in occ.iter().enumerate() {
            if let Some(q) = row.iter().position(|o| !o) {
                return Err(SimError::Format(format!("qubit {q} idle without a location at t={t}")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.locations {
            let q: Vec<String> = l.qubits.iter().map(|q| q.to_string()).collect();
            let op = l.op.text();
            let (name, rest) = op.split_once(' ').unwrap_or((&op, ""));
            s.push_str(&format!("t={} q={} op={}", l.step, q.join(","), name));
            if !rest.is_empty() {
                s.push(' ');
                s.push_str(rest);
            }
            s.push('\n');
        }
        s
    }

    pub fn measured(&self) -> Vec<(usize, Basis)> {
        self.locations
            .iter()
            .filter_map(|l| match l.op {
                QubitOp::Measure(b) => Some((l.qubits[0], b)),
                _ => None,
            })
            .collect()
    }

    /// Joint distribution of the measured bits, ordered as in [`Self::measured`];
    /// index bit `i` (most significant first) is measurement `i`.
    pub fn ideal_distribution(&self) -> Vec<f64> {
        let w = self.width;
        let mut psi = vec![C64::new(0.0, 0.0); 1 << w];
        psi[0] = C64::new(1.0, 0.0);
        let bit = |q: usize| 1usize << (w - 1 - q);
        let one = |psi: &mut Vec<C64>, q: usize, u: &Qubit2| {
            let b = bit(q);
            for i in 0..psi.len() {
                if i & b == 0 {
                    let (a0, a1) = (psi[i], psi[i | b]);
                    psi[i] = u[0][0] * a0 + u[0][1] * a1;
                    psi[i | b] = u[1][0] * a0 + u[1][1] * a1;
                }
            }
        };
        for l in &self.locations {
            let q = l.qubits[0];
            match l.op {
                QubitOp::Prep(t) => {
                    let (a, b) = t.amplitudes();
                    one(&mut psi, q, &[[a, -b.conj()], [b, a.conj()]]);
                }
                QubitOp::X => one(&mut psi, q, &qubit::x()),
                QubitOp::Z => one(&mut psi, q, &qubit::z()),
                QubitOp::H => one(&mut psi, q, &qubit::h()),
                QubitOp::S => one(&mut psi, q, &qubit::s()),
                QubitOp::T => one(&mut psi, q, &qubit::t()),
                QubitOp::Wait => {}
                QubitOp::Cnot => {
                    let (c, t) = (bit(l.qubits[0]), bit(l.qubits[1]));
                    for i in 0..psi.len() {
                        if i & c != 0 && i & t == 0 {
                            psi.swap(i, i | t);
                        }
                    }
                }
                QubitOp::Measure(Basis::X) => one(&mut psi, q, &qubit::h()),
                QubitOp::Measure(Basis::Z) => {}
            }
        }
        let meas = self.measured();
        let mut dist = vec![0.0; 1 << meas.len()];
        for (i, a) in psi.iter().enumerate() {
            let mut k = 0;
            for (q, _) in &meas {
                k = (k << 1) | usize::from(i & bit(*q) != 0);
            }
            dist[k] += a.norm_sqr();
        }
        dist
    }
}

// ---------------------------------------------------------------- gadgets

/// s-parameters of one Knill EC gadget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EcParams {
    pub s0: f64,
    pub s_h: f64,
    pub s_sum: f64,
    pub s_x: f64,
    pub s_z: f64,
    pub s_i: f64,
}

impl EcParams {
    pub fn uniform(s: f64) -> Self {
        Self { s0: s, s_h: s, s_sum: s, s_x: s, s_z: s, s_i: s }
    }

    /// Sub-locations built from `s_p`-preparations, `s_g`-gates and `s_m`-measurements.
    pub fn from_psm(s_p: f64, s_g: f64, s_m: f64) -> Self {
        Self { s0: s_p, s_h: s_g, s_sum: s_g, s_x: s_m, s_z: s_m, s_i: s_g }
    }

    /// Output support `s'` of the gadget.
    pub fn s_out(&self) -> f64 {
        2.0 * self.s0 + self.s_h + self.s_sum + (self.s_sum + self.s_x.max(self.s_z)).max(2.0 * self.s_i)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.s0, self.s_h, self.s_sum, self.s_x, self.s_z, self.s_i];
        if all.iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(SimError::Domain(format!("EC parameters must be finite and nonnegative: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GadgetKind {
    Prep(LogicalTarget),
    Gate(GateKind),
    Meas(Basis),
    KnillEc(EcParams),
    CatalyticS,
    TeleportT,
}

/// A gadget with its declared `s`; for an EC this is the output support `s'`.
#[derive(Clone, Debug, PartialEq)]
pub struct GadgetSpec {
    pub kind: GadgetKind,
    pub s: f64,
    pub lines: Vec<usize>,
}

/// Noise parameters of the physical locations of an FT-GKP circuit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FtParams {
    pub s_p: f64,
    pub s_g: f64,
    pub s_m: f64,
    pub ec: EcParams,
}

impl FtParams {
    pub fn uniform(s_p: f64, s_g: f64, s_m: f64) -> Self {
        Self { s_p, s_g, s_m, ec: EcParams::from_psm(s_p, s_g, s_m) }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [self.s_p, self.s_g, self.s_m] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(SimError::Domain(format!("s-parameter {s} must be finite and nonnegative")));
            }
        }
        self.ec.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExRec {
    /// Index into [`FtCircuit::locations`].
    pub location: usize,
    pub core: GadgetSpec,
    pub leading_ecs: Vec<GadgetSpec>,
    pub trailing_ecs: Vec<GadgetSpec>,
    pub truncated: bool,
    /// Indices into [`FtCircuit::ecs`].
    pub leading: Vec<usize>,
    pub trailing: Vec<usize>,
    pub core_ops: Range<usize>,
}

impl ExRec {
    pub fn is_measurement(&self) -> bool {
        matches!(self.core.kind, GadgetKind::Meas(_))
    }

    /// Gadget count of the truncated ExRec (an EC has 9 locations).
    pub fn truncated_size(&self) -> usize {
        9 * self.leading.len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExRecVerdict {
    pub good: bool,
    /// `c/2` minus the constrained sum, snapped to 0 within `1e-12 c`.
    pub margin: f64,
}

fn verdict(sum: f64) -> ExRecVerdict {
    let mut margin = SQRT_PI / 2.0 - sum;
    if margin.abs() < MARGIN_SNAP * SQRT_PI {
        margin = 0.0;
    }
    ExRecVerdict { good: margin > 0.0, margin }
}

/// Evaluate the goodness inequality of an ExRec.
pub fn check_exrec_good(ex: &ExRec) -> ExRecVerdict {
    let lead: f64 = ex.leading_ecs.iter().map(|e| e.s).sum();
    let trail = ex.trailing_ecs.iter().map(|e| e.s).fold(0.0, f64::max);
    let sum = match ex.core.kind {
        GadgetKind::Meas(_) => lead + ex.core.s,
        _ => lead + ex.core.s + trail,
    };
    verdict(sum)
}

// ---------------------------------------------------------------- CV circuit

/// One physical location of the CV circuit. Modes are virtual ids.
#[derive(Clone, Debug, PartialEq)]
pub enum CvOp {
    Prep { mode: usize, target: LogicalTarget, s: f64 },
    /// With `cond`, the gate acts only when that slot holds 1 and is a wait otherwise.
    Gate { gate: GateKind, modes: Vec<usize>, s: f64, cond: Option<usize> },
    Meas { mode: usize, basis: Basis, s: f64, slot: usize },
    /// `x ^= slot[x_slot]`, `z ^= slot[z_slot]` on the frame of `mode`.
    Frame { mode: usize, x_slot: usize, z_slot: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvLoc {
    pub op: CvOp,
    pub in_ec: bool,
}

impl CvLoc {
    pub fn modes(&self) -> Vec<usize> {
        match &self.op {
            CvOp::Prep { mode, .. } | CvOp::Meas { mode, .. } | CvOp::Frame { mode, .. } => vec![*mode],
            CvOp::Gate { modes, .. } => modes.clone(),
        }
    }

    pub fn kind(&self) -> Option<LocKind> {
        match self.op {
            CvOp::Prep { .. } => Some(LocKind::Prep),
            CvOp::Gate { .. } => Some(LocKind::Gate),
            CvOp::Meas { .. } => Some(LocKind::Meas),
            CvOp::Frame { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcRecord {
    pub line: usize,
    pub params: EcParams,
    pub input_mode: usize,
    pub ancilla: usize,
    pub output_mode: usize,
    pub slot_x: usize,
    pub slot_z: usize,
    pub ops: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataMeasurement {
    pub qubit: usize,
    pub basis: Basis,
    pub slot: usize,
}

/// Qubit-level location after S and T expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedLoc {
    pub kind: GadgetKind,
    pub lines: Vec<usize>,
    pub cond: Option<usize>,
    /// Index of the originating qubit-circuit location; `None` for the catalyst preparation.
    pub origin: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FtCircuit {
    pub params: FtParams,
    pub source: QubitCircuit,
    pub locations: Vec<ExpandedLoc>,
    pub ops: Vec<CvLoc>,
    pub ecs: Vec<EcRecord>,
    pub exrecs: Vec<ExRec>,
    pub measurements: Vec<DataMeasurement>,
    /// Final mode of each unmeasured line.
    pub outputs: BTreeMap<usize, usize>,
    pub lines: usize,
    pub catalyst: Option<usize>,
    pub n_modes: usize,
    pub n_slots: usize,
}

/// Depth of the Knill EC wiring: the output mode passes four gate gadgets.
pub const EC_OUTPUT_DEPTH: usize = 4;

impl FtCircuit {
    /// `(mode, depth)` after each op, where depth counts gate gadgets since
    /// preparation and a SUM takes one more than the deeper input.
    pub fn depths(&self) -> Vec<Vec<(usize, usize)>> {
        let mut d = vec![0usize; self.n_modes];
        self.ops
            .iter()
            .map(|loc| match &loc.op {
                CvOp::Prep { mode, .. } => {
                    d[*mode] = 0;
                    vec![(*mode, 0)]
                }
                CvOp::Gate { modes, .. } => {
                    let v = 1 + modes.iter().map(|m| d[*m]).max().unwrap_or(0);
                    modes.iter().map(|m| {
                        d[*m] = v;
                        (*m, v)
                    }).collect()
                }
                _ => Vec::new(),
            })
            .collect()
    }

    /// Largest number of gate gadgets any prepared mode passes before measurement.
    pub fn ell(&self) -> usize {
        self.depths().iter().flatten().map(|(_, d)| *d).max().unwrap_or(0)
    }

    /// Location count of the qubit-level circuit (after expansion).
    pub fn location_count(&self) -> usize {
        self.locations.len()
    }

    /// Largest truncated-ExRec gadget count.
    pub fn l_max(&self) -> usize {
        self.exrecs.iter().map(|e| e.truncated_size()).max().unwrap_or(0)
    }
}

struct Builder {
    params: FtParams,
    ops: Vec<CvLoc>,
    ecs: Vec<EcRecord>,
    locations: Vec<ExpandedLoc>,
    line_mode: Vec<Option<usize>>,
    n_modes: usize,
    n_slots: usize,
}

impl Builder {
    fn mode(&mut self) -> usize {
        self.n_modes += 1;
        self.n_modes - 1
    }

    fn slot(&mut self) -> usize {
        self.n_slots += 1;
        self.n_slots - 1
    }

    fn push(&mut self, op: CvOp, in_ec: bool) {
        self.ops.push(CvLoc { op, in_ec });
    }

    fn live(&self, line: usize) -> Result<usize> {
        self.line_mode[line].ok_or_else(|| SimError::Domain(format!("line {line} has no live mode")))
    }

    fn ec(&mut self, line: usize) -> Result<usize> {
        let p = self.params.ec;
        let d = self.live(line)?;
        let start = self.ops.len();
        let (a1, a2) = (self.mode(), self.mode());
        let (sx, sz) = (self.slot(), self.slot());
        self.push(CvOp::Prep { mode: a1, target: LogicalTarget::Zero, s: p.s0 }, true);
        self.push(CvOp::Prep { mode: a2, target: LogicalTarget::Zero, s: p.s0 }, true);
        self.push(CvOp::Gate { gate: GateKind::Fourier, modes: vec![a1], s: p.s_h, cond: None }, true);
        let sum = |c, t| GateKind::Sum { control: c, target: t };
        self.push(CvOp::Gate { gate: sum(a1, a2), modes: vec![a1, a2], s: p.s_sum, cond: None }, true);
        self.push(CvOp::Gate { gate: sum(d, a1), modes: vec![d, a1], s: p.s_sum, cond: None }, true);
        self.push(CvOp::Gate { gate: GateKind::Wait, modes: vec![a2], s: p.s_i, cond: None }, true);
        self.push(CvOp::Meas { mode: d, basis: Basis::X, s: p.s_x, slot: sx }, true);
        self.push(CvOp::Meas { mode: a1, basis: Basis::Z, s: p.s_z, slot: sz }, true);
        self.push(CvOp::Gate { gate: GateKind::Wait, modes: vec![a2], s: p.s_i, cond: None }, true);
        self.push(CvOp::Frame { mode: a2, x_slot: sz, z_slot: sx }, true);
        self.line_mode[line] = Some(a2);
        self.ecs.push(EcRecord {
            line,
            params: p,
            input_mode: d,
            ancilla: a1,
            output_mode: a2,
            slot_x: sx,
            slot_z: sz,
            ops: start..self.ops.len(),
        });
        Ok(self.ecs.len() - 1)
    }

    fn location(&mut self, loc: &ExpandedLoc) -> Result<Option<usize>> {
        let p = self.params;
        let mut slot = None;
        match &loc.kind {
            GadgetKind::Prep(t) => {
                let m = self.mode();
                self.line_mode[loc.lines[0]] = Some(m);
                self.push(CvOp::Prep { mode: m, target: *t, s: p.s_p }, false);
            }
            GadgetKind::Gate(g) => {
                let modes = loc.lines.iter().map(|l| self.live(*l)).collect::<Result<Vec<_>>>()?;
                let gate = match g {
                    GateKind::Sum { .. } => GateKind::Sum { control: modes[0], target: modes[1] },
                    other => other.clone(),
                };
                self.push(CvOp::Gate { gate, modes, s: p.s_g, cond: loc.cond }, false);
            }
            GadgetKind::Meas(b) => {
                let m = self.live(loc.lines[0])?;
                let k = self.slot();
                self.push(CvOp::Meas { mode: m, basis: *b, s: p.s_m, slot: k }, false);
                self.line_mode[loc.lines[0]] = None;
                slot = Some(k);
            }
            other => return Err(SimError::UnsupportedGate(format!("{other:?} is not a physical location"))),
        }
        Ok(slot)
    }
}

fn expand(qc: &QubitCircuit) -> (Vec<ExpandedLoc>, usize, Option<usize>) {
    let needs_catalyst = qc.locations.iter().any(|l| matches!(l.op, QubitOp::S | QubitOp::T));
    let mut lines = qc.width;
    let catalyst = needs_catalyst.then(|| {
        lines += 1;
        lines - 1
    });
    let mut out = Vec::new();
    if let Some(y) = catalyst {
        out.push(ExpandedLoc { kind: GadgetKind::Prep(LogicalTarget::Y), lines: vec![y], cond: None, origin: None });
    }
    let gate = |g: GateKind, lines: Vec<usize>, cond, origin| ExpandedLoc { kind: GadgetKind::Gate(g), lines, cond, origin };
    let cnot = || GateKind::Sum { control: 0, target: 1 };
    // the magic-state measurement slot is resolved by the builder; the
    // placeholder usize::MAX marks "slot of the preceding magic measurement"
    for (i, l) in qc.locations.iter().enumerate() {
        let o = Some(i);
        let q = l.qubits[0];
        let s_gadget = |cond: Option<usize>, out: &mut Vec<ExpandedLoc>| {
            let y = catalyst.expect("catalyst present");
            out.push(gate(cnot(), vec![q, y], cond, o));
            out.push(gate(GateKind::Fourier, vec![y], cond, o));
            out.push(gate(cnot(), vec![q, y], cond, o));
            out.push(gate(GateKind::Fourier, vec![y], cond, o));
        };
        match l.op {
            QubitOp::Prep(t) => out.push(ExpandedLoc { kind: GadgetKind::Prep(t), lines: vec![q], cond: None, origin: o }),
            QubitOp::X => out.push(gate(GateKind::DisplacementX, vec![q], None, o)),
            QubitOp::Z => out.push(gate(GateKind::DisplacementZ, vec![q], None, o)),
            QubitOp::H => out.push(gate(GateKind::Fourier, vec![q], None, o)),
            QubitOp::Wait => out.push(gate(GateKind::Wait, vec![q], None, o)),
            QubitOp::Cnot => out.push(gate(cnot(), l.qubits.clone(), None, o)),
            QubitOp::Measure(b) => out.push(ExpandedLoc { kind: GadgetKind::Meas(b), lines: vec![q], cond: None, origin: o }),
            QubitOp::S => s_gadget(None, &mut out),
            QubitOp::T => {
                let m = lines;
                lines += 1;
                out.push(ExpandedLoc { kind: GadgetKind::Prep(LogicalTarget::PiOver8), lines: vec![m], cond: None, origin: o });
                out.push(gate(cnot(), vec![q, m], None, o));
                out.push(ExpandedLoc { kind: GadgetKind::Meas(Basis::Z), lines: vec![m], cond: None, origin: o });
                s_gadget(Some(usize::MAX), &mut out);
            }
        }
    }
    (out, lines, catalyst)
}

/// Replace every location by its gadget, insert a Knill EC between each pair of
/// consecutive locations on a line, and partition the result into ExRecs.
pub fn build_ft_circuit(qc: &QubitCircuit, params: FtParams) -> Result<FtCircuit> {
    qc.validate()?;
    params.validate()?;
    let (mut locations, lines, catalyst) = expand(qc);
    let mut b = Builder {
        params,
        ops: Vec::new(),
        ecs: Vec::new(),
        locations: Vec::new(),
        line_mode: vec![None; lines],
        n_modes: 0,
        n_slots: 0,
    };
    let mut last: Vec<Option<usize>> = vec![None; lines];
    let mut leading: Vec<Vec<usize>> = vec![Vec::new(); locations.len()];
    let mut trailing: Vec<Vec<usize>> = vec![Vec::new(); locations.len()];
    let mut core_ops = Vec::with_capacity(locations.len());
    let mut measurements = Vec::new();
    let mut magic_slot = None;
    for i in 0..locations.len() {
        if locations[i].cond == Some(usize::MAX) {
            locations[i].cond = magic_slot;
        }
        let loc = locations[i].clone();
        for l in &loc.lines {
            if let Some(prev) = last[*l] {
                let e = b.ec(*l)?;
                leading[i].push(e);
                trailing[prev].push(e);
            }
        }
        let start = b.ops.len();
        let slot = b.location(&loc)?;
        core_ops.push(start..b.ops.len());
        if let (Some(k), GadgetKind::Meas(basis)) = (slot, &loc.kind) {
            if loc.lines[0] < qc.width {
                measurements.push(DataMeasurement { qubit: loc.lines[0], basis: *basis, slot: k });
            } else {
                magic_slot = Some(k);
            }
        }
        for l in &loc.lines {
            last[*l] = Some(i);
        }
    }
    let ec_spec = |e: usize| GadgetSpec {
        kind: GadgetKind::KnillEc(b.ecs[e].params),
        s: b.ecs[e].params.s_out(),
        lines: vec![b.ecs[e].line],
    };
    let mut exrecs = Vec::with_capacity(locations.len());
    for (i, loc) in locations.iter().enumerate() {
        let s = match loc.kind {
            GadgetKind::Prep(_) => params.s_p,
            GadgetKind::Meas(_) => params.s_m,
            _ => params.s_g,
        };
        let is_meas = matches!(loc.kind, GadgetKind::Meas(_));
        exrecs.push(ExRec {
            location: i,
            core: GadgetSpec { kind: loc.kind.clone(), s, lines: loc.lines.clone() },
            leading_ecs: leading[i].iter().map(|e| ec_spec(*e)).collect(),
            trailing_ecs: trailing[i].iter().map(|e| ec_spec(*e)).collect(),
            truncated: !is_meas && trailing[i].len() < loc.lines.len(),
            leading: leading[i].clone(),
            trailing: trailing[i].clone(),
            core_ops: core_ops[i].clone(),
        });
    }
    let outputs = b.line_mode.iter().enumerate().filter_map(|(l, m)| m.map(|m| (l, m))).collect();
    b.locations = locations;
    Ok(FtCircuit {
        params,
        source: qc.clone(),
        locations: b.locations,
        ops: b.ops,
        ecs: b.ecs,
        exrecs,
        measurements,
        outputs,
        lines,
        catalyst,
        n_modes: b.n_modes,
        n_slots: b.n_slots,
    })
}

// ---------------------------------------------------------------- frames

/// Classical Pauli frame: the physical state is `X^x Z^z` times the logical one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PauliFrame {
    bits: BTreeMap<usize, (bool, bool)>,
}

impl PauliFrame {
    pub fn get(&self, mode: usize) -> (bool, bool) {
        self.bits.get(&mode).copied().unwrap_or((false, false))
    }

    pub fn set(&mut self, mode: usize, x: bool, z: bool) {
        self.bits.insert(mode, (x, z));
    }

    pub fn flip(&mut self, mode: usize, x: bool, z: bool) {
        let (a, b) = self.get(mode);
        self.set(mode, a ^ x, b ^ z);
    }

    pub fn clear(&mut self, mode: usize) {
        self.bits.remove(&mode);
    }

    /// Conjugate the frame through a Clifford gate on virtual modes.
    pub fn propagate(&mut self, gate: &GateKind, modes: &[usize]) {
        match gate {
            GateKind::Fourier => {
                let (x, z) = self.get(modes[0]);
                self.set(modes[0], z, x);
            }
            GateKind::Shear => {
                let (x, z) = self.get(modes[0]);
                self.set(modes[0], x, z ^ x);
            }
            GateKind::Sum { .. } => {
                let (xc, zc) = self.get(modes[0]);
                let (xt, zt) = self.get(modes[1]);
                self.set(modes[0], xc, zc ^ zt);
                self.set(modes[1], xt ^ xc, zt);
            }
            _ => {}
        }
    }

    /// Measured bit with the frame folded in.
    pub fn correct(&self, mode: usize, basis: Basis, raw: u8) -> u8 {
        let (x, z) = self.get(mode);
        raw ^ u8::from(match basis {
            Basis::Z => x,
            Basis::X => z,
        })
    }
}

// ---------------------------------------------------------------- exact simulation

pub type EnvelopeFactory = Arc<dyn Fn(f64) -> EnvelopeSpec + Send + Sync>;

pub fn bump_envelopes() -> EnvelopeFactory {
    Arc::new(EnvelopeSpec::bump)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptEntry {
    pub op: usize,
    pub gadget: String,
    pub slot: Option<usize>,
    pub raw: Option<u8>,
    pub corrected: Option<u8>,
    pub frame: (bool, bool),
}

impl fmt::Display for TranscriptEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = |v: Option<u8>| v.map_or("-".to_string(), |b| b.to_string());
        write!(
            f,
            "step={} gadget={} slot={} raw={} corrected={} frame={}{}",
            self.op,
            self.gadget,
            self.slot.map_or("-".to_string(), |s| s.to_string()),
            b(self.raw),
            b(self.corrected),
            u8::from(self.frame.0),
            u8::from(self.frame.1)
        )
    }
}

/// Trajectory simulator: homodyne outcomes are sampled and measured modes
/// dropped, noise displacements come from a [`NoiseAssignment`].
#[derive(Clone)]
pub struct ExactSim {
    grid: GridSpec,
    state: Option<SssState>,
    live: Vec<usize>,
    pub frame: PauliFrame,
    slots: Vec<Option<u8>>,
    envelope: EnvelopeFactory,
    noise: NoiseAssignment,
    key: u64,
    preset: HashMap<usize, SssState>,
    /// Apply corrections as physical displacements instead of tracking them.
    pub explicit_corrections: bool,
    /// Keep measured modes as unread registers and apply the corrections that
    /// read them as displacements controlled on the register; decoding then
    /// averages over every outcome.
    pub coherent_measurements: bool,
    /// slot -> (register mode, incoming frame bit)
    registers: HashMap<usize, (usize, u8)>,
    pub transcript: Vec<TranscriptEntry>,
}

impl ExactSim {
    /// Bounded draws are snapped to grid offsets strictly inside their support.
    pub fn new(grid: GridSpec, mut noise: NoiseAssignment, key: u64) -> Self {
        noise.snap.get_or_insert(grid);
        Self {
            grid,
            state: None,
            live: Vec::new(),
            frame: PauliFrame::default(),
            slots: Vec::new(),
            envelope: bump_envelopes(),
            noise,
            key,
            preset: HashMap::new(),
            explicit_corrections: false,
            coherent_measurements: false,
            registers: HashMap::new(),
            transcript: Vec::new(),
        }
    }

    /// Start from an existing state whose position `i` becomes virtual mode `i`.
    pub fn from_state(state: SssState, noise: NoiseAssignment, key: u64) -> Self {
        let mut sim = Self::new(*state.grid(), noise, key);
        sim.live = (0..state.modes()).collect();
        sim.state = Some(state);
        sim
    }

    pub fn with_envelope(mut self, f: EnvelopeFactory) -> Self {
        self.envelope = f;
        self
    }

    /// Use `state` (single mode) whenever virtual mode `mode` is prepared.
    pub fn preset(&mut self, mode: usize, state: SssState) {
        self.preset.insert(mode, state);
    }

    pub fn state(&self) -> Option<&SssState> {
        self.state.as_ref()
    }

    pub fn live(&self) -> &[usize] {
        &self.live
    }

    pub fn slot(&self, k: usize) -> Option<u8> {
        self.slots.get(k).copied().flatten()
    }

    pub fn pos(&self, mode: usize) -> Result<usize> {
        self.live.iter().position(|m| *m == mode).ok_or(SimError::ModeOutOfRange(mode))
    }

    fn st(&self) -> Result<&SssState> {
        self.state.as_ref().ok_or_else(|| SimError::Domain("no live modes".into()))
    }

    fn displace(&mut self, mode: usize, w1: f64, w2: f64) -> Result<()> {
        if w1 == 0.0 && w2 == 0.0 {
            return Ok(());
        }
        let p = self.pos(mode)?;
        self.state = Some(apply_displacement(self.st()?, p, w1, w2)?);
        Ok(())
    }

    fn noise_at(&mut self, idx: usize, loc: &CvLoc, sub: usize, mode: usize, s: f64) -> Result<()> {
        let kind = loc.kind().expect("physical location");
        let sh = self.noise.draw(self.key, idx, sub, kind, loc.in_ec, s);
        self.displace(mode, sh.w1, sh.w2)
    }

    /// Displace `mode` by `(w1, w2)` on the branch where the register's logical
    /// label XOR `flip` is one.
    fn controlled_displace(&mut self, register: usize, flip: u8, mode: usize, w1: f64, w2: f64) -> Result<()> {
        let (pr, pm) = (self.pos(register)?, self.pos(mode)?);
        let st = self.st()?;
        let (g, modes) = (*st.grid(), st.modes());
        let (on, off): (Vec<(Label, C64)>, Vec<(Label, C64)>) =
            st.entries().iter().partition(|(l, _)| g.unpack(l[pr]).0 ^ flip == 1);
        let mut entries = off;
        if !on.is_empty() {
            let moved = apply_displacement(&SssState::from_entries(g, modes, on)?, pm, w1, w2)?;
            entries.extend_from_slice(moved.entries());
        }
        self.state = Some(SssState::from_entries(g, modes, entries)?);
        Ok(())
    }

    fn set_slot(&mut self, k: usize, v: u8) {
        if self.slots.len() <= k {
            self.slots.resize(k + 1, None);
        }
        self.slots[k] = Some(v);
    }

    fn slot_bit(&self, k: usize) -> Result<u8> {
        if self.registers.contains_key(&k) {
            return Err(SimError::Domain(format!("slot {k} holds an unread register")));
        }
        self.slot(k).ok_or_else(|| SimError::Domain(format!("slot {k} read before it was written")))
    }

    /// Execute `ops`, where `ops[0]` has global index `base` (used for noise draws).
    pub fn run<R: Rng + ?Sized>(&mut self, ops: &[CvLoc], base: usize, rng: &mut R) -> Result<()> {
        for (i, loc) in ops.iter().enumerate() {
            self.step(base + i, loc, rng)?;
        }
        Ok(())
    }

    fn inject(&mut self, idx: usize, loc: &CvLoc) -> Result<TranscriptEntry> {
        let inj: Vec<(f64, f64)> =
            self.noise.injections.iter().filter(|(o, ..)| *o == idx).map(|(_, a, b)| (*a, *b)).collect();
        if let Some(m) = loc.modes().first() {
            for (a, b) in inj {
                if self.live.contains(m) {
                    self.displace(*m, a, b)?;
                }
            }
        }
        Ok(TranscriptEntry { op: idx, gadget: String::new(), slot: None, raw: None, corrected: None, frame: (false, false) })
    }

    fn record(&mut self, loc: &CvLoc, mut entry: TranscriptEntry) {
        if let Some(m) = loc.modes().first() {
            if entry.raw.is_none() {
                entry.frame = self.frame.get(*m);
            }
        }
        self.transcript.push(entry);
    }

    fn homodyne_quad(basis: Basis) -> Quadrature {
        match basis {
            Basis::Z => Quadrature::Q,
            Basis::X => Quadrature::P,
        }
    }

    fn finish_meas(&mut self, entry: &mut TranscriptEntry, mode: usize, basis: Basis, slot: usize, out: HomodyneSample) -> Result<()> {
        let p = self.pos(mode)?;
        let corrected = self.frame.correct(mode, basis, out.bit);
        entry.frame = self.frame.get(mode);
        self.set_slot(slot, corrected);
        self.state = out.remaining;
        self.live.remove(p);
        self.frame.clear(mode);
        entry.gadget = format!("meas{basis:?}");
        entry.slot = Some(slot);
        entry.raw = Some(out.bit);
        entry.corrected = Some(corrected);
        Ok(())
    }

    /// Every branch of one op with its probability. Only measurements branch;
    /// outcomes with probability at most `min_prob` are dropped.
    pub fn step_branches(&self, idx: usize, loc: &CvLoc, min_prob: f64) -> Result<Vec<(f64, ExactSim)>> {
        let CvOp::Meas { mode, basis, s, slot } = &loc.op else {
            let mut sim = self.clone();
            // only measurements consume randomness
            sim.step(idx, loc, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
            return Ok(vec![(1.0, sim)]);
        };
        let mut pre = self.clone();
        let entry = pre.inject(idx, loc)?;
        pre.noise_at(idx, loc, 0, *mode, *s)?;
        let p = pre.pos(*mode)?;
        homodyne_branches(pre.st()?, p, Self::homodyne_quad(*basis), min_prob)?
            .into_iter()
            .map(|(w, out)| {
                let mut sim = pre.clone();
                let mut e = entry.clone();
                sim.finish_meas(&mut e, *mode, *basis, *slot, out)?;
                sim.record(loc, e);
                Ok((w, sim))
            })
            .collect()
    }

    pub fn step<R: Rng + ?Sized>(&mut self, idx: usize, loc: &CvLoc, rng: &mut R) -> Result<()> {
        let mut entry = self.inject(idx, loc)?;
        match &loc.op {
            CvOp::Prep { mode, target, s } => {
                let fresh = match self.preset.get(mode) {
                    Some(st) => st.clone(),
                    None => {
                        let env = (self.envelope)(s.max(0.5 * self.grid.delta()));
                        make_s_state_unchecked(*target, &env, self.grid)?
                    }
                };
                self.state = Some(match self.state.take() {
                    Some(st) => st.tensor(&fresh)?,
                    None => fresh,
                });
                self.live.push(*mode);
                self.frame.clear(*mode);
                self.noise_at(idx, loc, 0, *mode, *s)?;
                entry.gadget = "prep".into();
            }
            CvOp::Gate { gate, modes, s, cond } => {
                let active = match cond {
                    Some(k) => self.slot_bit(*k)? == 1,
                    None => true,
                };
                if active && *gate != GateKind::Wait {
                    let pos = modes.iter().map(|m| self.pos(*m)).collect::<Result<Vec<_>>>()?;
                    let g = match gate {
                        GateKind::Sum { .. } => GateKind::Sum { control: pos[0], target: pos[1] },
                        other => other.clone(),
                    };
                    self.state = Some(apply_gate(self.st()?, &g, pos[0])?);
                    self.frame.propagate(gate, modes);
                }
                for (k, m) in modes.iter().enumerate() {
                    self.noise_at(idx, loc, k, *m, *s)?;
                }
                entry.gadget = if active { gate.name().into() } else { "I".into() };
            }
            CvOp::Meas { mode, basis, s, slot } if self.coherent_measurements => {
                self.noise_at(idx, loc, 0, *mode, *s)?;
                let p = self.pos(*mode)?;
                if *basis == Basis::X {
                    self.state = Some(to_p_frame(self.st()?, p)?);
                }
                self.registers.insert(*slot, (*mode, self.frame.correct(*mode, *basis, 0)));
                self.frame.clear(*mode);
                entry.gadget = format!("meas{basis:?}");
                entry.slot = Some(*slot);
            }
            CvOp::Meas { mode, basis, s, slot } => {
                self.noise_at(idx, loc, 0, *mode, *s)?;
                let p = self.pos(*mode)?;
                let out = sample_homodyne(self.st()?, p, Self::homodyne_quad(*basis), rng)?;
                self.finish_meas(&mut entry, *mode, *basis, *slot, out)?;
            }
            CvOp::Frame { mode, x_slot, z_slot } if self.registers.contains_key(x_slot) || self.registers.contains_key(z_slot) => {
                let c = SQRT_PI;
                for (slot, w1, w2) in [(*x_slot, c, 0.0), (*z_slot, 0.0, c)] {
                    match self.registers.get(&slot).copied() {
                        Some((r, flip)) => self.controlled_displace(r, flip, *mode, w1, w2)?,
                        None if self.slot_bit(slot)? == 1 => self.displace(*mode, w1, w2)?,
                        None => {}
                    }
                }
                entry.gadget = "frame".into();
            }
            CvOp::Frame { mode, x_slot, z_slot } => {
                let x = self.slot_bit(*x_slot)? == 1;
                let z = self.slot_bit(*z_slot)? == 1;
                if self.explicit_corrections {
                    let c = SQRT_PI;
                    self.displace(*mode, if x { c } else { 0.0 }, if z { c } else { 0.0 })?;
                } else {
                    self.frame.flip(*mode, x, z);
                }
                entry.gadget = "frame".into();
            }
        }
        self.record(loc, entry);
        Ok(())
    }

    /// Corrected-outcome probabilities of a pending measurement op, including its noise draw.
    pub fn outcome_probabilities(&self, idx: usize, loc: &CvLoc) -> Result<[f64; 2]> {
        let CvOp::Meas { mode, basis, s, .. } = &loc.op else {
            return Err(SimError::Domain("not a measurement".into()));
        };
        let sh = self.noise.draw(self.key, idx, 0, LocKind::Meas, loc.in_ec, *s);
        let p = self.pos(*mode)?;
        let st = apply_displacement(self.st()?, p, sh.w1, sh.w2)?;
        let mut probs = [0.0; 2];
        for (x, w) in homodyne_distribution(&st, p, Self::homodyne_quad(*basis))? {
            probs[crate::measurement::gkp_bin(x) as usize] += w;
        }
        let flip = self.frame.correct(*mode, *basis, 0) as usize;
        Ok([probs[flip], probs[1 - flip]])
    }

    /// Frame-corrected logical density of one virtual mode.
    pub fn decode(&self, mode: usize) -> Result<crate::zakcore::QubitDensity> {
        let (x, z) = self.frame.get(mode);
        Ok(crate::zakcore::ideal_decode(self.st()?, self.pos(mode)?)?.pauli(x, z))
    }

    /// Frame-corrected joint logical density of several virtual modes,
    /// basis index with `modes[0]` as the most significant bit.
    pub fn decode_joint(&self, modes: &[usize]) -> Result<DMatrix<C64>> {
        let pos = modes.iter().map(|m| self.pos(*m)).collect::<Result<Vec<_>>>()?;
        let mut rho = logical_density(self.st()?, &pos)?;
        let k = modes.len();
        let (mut xm, mut zm) = (0usize, 0usize);
        for (i, m) in modes.iter().enumerate() {
            let (x, z) = self.frame.get(*m);
            let b = 1 << (k - 1 - i);
            if x {
                xm |= b;
            }
            if z {
                zm |= b;
            }
        }
        let dim = 1 << k;
        let sign = |a: usize| if (a & zm).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
        let old = rho.clone();
        for a in 0..dim {
            for b in 0..dim {
                rho[(a, b)] = old[(a ^ xm, b ^ xm)] * sign(a ^ xm) * sign(b ^ xm);
            }
        }
        Ok(rho)
    }
}

/// Joint logical density of the modes at `positions` (syndromes and all other modes traced).
pub fn logical_density(state: &SssState, positions: &[usize]) -> Result<DMatrix<C64>> {
    for p in positions {
        if *p >= state.modes() {
            return Err(SimError::ModeOutOfRange(*p));
        }
    }
    let nn = (state.grid().n() * state.grid().n()) as u16;
    let k = positions.len();
    let dim = 1 << k;
    let mut map: HashMap<Label, Vec<C64>> = HashMap::new();
    for (l, a) in state.entries() {
        let mut key = *l;
        let mut idx = 0;
        for p in positions {
            idx = (idx << 1) | (l[*p] / nn) as usize;
            key[*p] %= nn;
        }
        map.entry(key).or_insert_with(|| vec![C64::new(0.0, 0.0); dim])[idx] += a;
    }
    let mut rho = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    for v in map.values() {
        for i in 0..dim {
            for j in 0..dim {
                rho[(i, j)] += v[i] * v[j].conj();
            }
        }
    }
    Ok(rho)
}

/// Corrected data-measurement outcomes of one exact trajectory of `circuit`.
#[derive(Clone, Debug)]
pub struct ExactRun {
    pub outcomes: Vec<u8>,
    pub transcript: Vec<TranscriptEntry>,
}

pub fn run_exact<R: Rng + ?Sized>(
    circuit: &FtCircuit,
    grid: GridSpec,
    noise: NoiseAssignment,
    key: u64,
    rng: &mut R,
) -> Result<ExactRun> {
    let mut sim = ExactSim::new(grid, noise, key);
    sim.run(&circuit.ops, 0, rng)?;
    let outcomes = circuit.measurements.iter().map(|m| sim.slot_bit(m.slot)).collect::<Result<Vec<_>>>()?;
    Ok(ExactRun { outcomes, transcript: sim.transcript })
}

// ---------------------------------------------------------------- standalone gadgets

/// The ten ops of one Knill EC on mode `data`, with fresh modes numbered from
/// `next` and slots 0 and 1; also returns the output mode.
pub fn knill_ec_ops(data: usize, next: usize, params: &EcParams) -> (Vec<CvLoc>, usize) {
    let mut b = Builder {
        params: FtParams { ec: *params, ..FtParams::uniform(0.0, 0.0, 0.0) },
        ops: Vec::new(),
        ecs: Vec::new(),
        locations: Vec::new(),
        line_mode: vec![Some(data)],
        n_modes: next,
        n_slots: 0,
    };
    b.ec(0).expect("data line is live");
    let out = b.ecs[0].output_mode;
    (b.ops, out)
}

#[derive(Clone, Debug)]
pub struct EcOutcome {
    /// The input state with the data mode removed and the output appended last.
    pub state: SssState,
    pub output_mode: usize,
    pub m_x: u8,
    pub m_z: u8,
    /// `(x, z)` frame bits of the output.
    pub frame: (bool, bool),
}

/// One Knill EC trajectory on `data_mode`; the data is teleported to a fresh mode.
pub fn run_knill_ec<R: Rng + ?Sized>(
    state: &SssState,
    data_mode: usize,
    params: &EcParams,
    noise: &NoiseAssignment,
    key: u64,
    rng: &mut R,
) -> Result<EcOutcome> {
    run_knill_ec_with(state, data_mode, params, noise, key, &bump_envelopes(), rng)
}

/// [`run_knill_ec`] with a chosen ancilla envelope family.
pub fn run_knill_ec_with<R: Rng + ?Sized>(
    state: &SssState,
    data_mode: usize,
    params: &EcParams,
    noise: &NoiseAssignment,
    key: u64,
    envelope: &EnvelopeFactory,
    rng: &mut R,
) -> Result<EcOutcome> {
    params.validate()?;
    state.check_mode(data_mode)?;
    let (ops, out) = knill_ec_ops(data_mode, state.modes(), params);
    let mut sim = ExactSim::from_state(state.clone(), noise.clone(), key).with_envelope(envelope.clone());
    sim.run(&ops, 0, rng)?;
    let st = sim.state.take().ok_or_else(|| SimError::Domain("EC lost every mode".into()))?;
    let output_mode = sim.pos(out)?;
    Ok(EcOutcome {
        state: st,
        output_mode,
        m_x: sim.slot_bit(0)?,
        m_z: sim.slot_bit(1)?,
        frame: sim.frame.get(out),
    })
}

/// Knill EC with both measurements kept as traced registers: the result is
/// the ensemble over the four outcome branches, with the data and ancilla
/// modes still present and the output at position `modes + 1`.
pub fn run_knill_ec_channel(
    state: &SssState,
    data_mode: usize,
    params: &EcParams,
    envelope: &EnvelopeFactory,
) -> Result<MixedState> {
    params.validate()?;
    state.check_mode(data_mode)?;
    let g = *state.grid();
    let n = state.modes();
    let anc = |s: f64| make_s_state_unchecked(LogicalTarget::Zero, &envelope(s.max(0.5 * g.delta())), g);
    let a1 = n;
    let a2 = n + 1;
    let mut st = state.tensor(&anc(params.s0)?)?.tensor(&anc(params.s0)?)?;
    st = apply_gate(&st, &GateKind::Fourier, a1)?;
    st = apply_gate(&st, &GateKind::Sum { control: a1, target: a2 }, a1)?;
    st = apply_gate(&st, &GateKind::Sum { control: data_mode, target: a1 }, data_mode)?;
    let xd = to_p_frame(&st, data_mode)?;
    let mut members = Vec::new();
    for bx in 0..2u8 {
        let px = xd.project_bit(data_mode, bx);
        for bz in 0..2u8 {
            let m = px.project_bit(a1, bz);
            let w = m.norm_sqr();
            if w > 0.0 {
                members.push((w, m.normalized().expect("nonzero branch")));
            }
        }
    }
    Ok(MixedState { grid: g, modes: n + 2, members })
}

/// Catalytic S: `SUM(d, y) F(y) SUM(d, y) F(y)` with an ideal-noise realization.
pub fn run_catalytic_s<R: Rng + ?Sized>(state: &SssState, data_mode: usize, y_mode: usize, rng: &mut R) -> Result<SssState> {
    state.check_mode(data_mode)?;
    state.check_mode(y_mode)?;
    let ops = s_gadget_ops(data_mode, y_mode, None);
    let mut sim = ExactSim::from_state(state.clone(), NoiseAssignment::ideal(), 0);
    sim.run(&ops, 0, rng)?;
    sim.state.ok_or_else(|| SimError::Domain("state vanished".into()))
}

fn s_gadget_ops(d: usize, y: usize, cond: Option<usize>) -> Vec<CvLoc> {
    let g = |gate, modes| CvLoc { op: CvOp::Gate { gate, modes, s: 0.0, cond }, in_ec: false };
    vec![
        g(GateKind::Sum { control: d, target: y }, vec![d, y]),
        g(GateKind::Fourier, vec![y]),
        g(GateKind::Sum { control: d, target: y }, vec![d, y]),
        g(GateKind::Fourier, vec![y]),
    ]
}

/// Teleported T: `SUM(d, magic)`, Z-measure the magic mode, and on outcome 1
/// apply S through the catalyst `y_mode`. Returns the state without the magic
/// mode and the outcome.
pub fn run_teleport_t<R: Rng + ?Sized>(
    state: &SssState,
    data_mode: usize,
    magic_mode: usize,
    y_mode: usize,
    rng: &mut R,
) -> Result<(SssState, u8)> {
    for m in [data_mode, magic_mode, y_mode] {
        state.check_mode(m)?;
    }
    let mut ops = vec![
        CvLoc { op: CvOp::Gate { gate: GateKind::Sum { control: data_mode, target: magic_mode }, modes: vec![data_mode, magic_mode], s: 0.0, cond: None }, in_ec: false },
        CvLoc { op: CvOp::Meas { mode: magic_mode, basis: Basis::Z, s: 0.0, slot: 0 }, in_ec: false },
    ];
    ops.extend(s_gadget_ops(data_mode, y_mode, Some(0)));
    let mut sim = ExactSim::from_state(state.clone(), NoiseAssignment::ideal(), 0);
    sim.run(&ops, 0, rng)?;
    let bit = sim.slot_bit(0)?;
    Ok((sim.state.ok_or_else(|| SimError::Domain("state vanished".into()))?, bit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zakcore::{ideal_decode, QubitDensity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn grid16() -> GridSpec {
        GridSpec::new(16, 16).unwrap()
    }

    #[test]
    fn s_out_formula() {
        assert!((EcParams::uniform(0.01).s_out() - 0.06).abs() < 1e-15);
        let p = EcParams { s0: 0.1, s_h: 0.2, s_sum: 0.05, s_x: 0.3, s_z: 0.1, s_i: 0.01 };
        assert!((p.s_out() - (0.2 + 0.2 + 0.05 + 0.35)).abs() < 1e-15);
        assert!(EcParams { s0: -0.1, ..p }.validate().is_err());
    }

    fn spec(kind: GadgetKind, s: f64) -> GadgetSpec {
        GadgetSpec { kind, s, lines: vec![0] }
    }

    fn exrec(core: GadgetSpec, lead: &[f64], trail: &[f64]) -> ExRec {
        let ec = |s: f64| spec(GadgetKind::KnillEc(EcParams::uniform(0.0)), s);
        ExRec {
            location: 0,
            core,
            leading_ecs: lead.iter().map(|s| ec(*s)).collect(),
            trailing_ecs: trail.iter().map(|s| ec(*s)).collect(),
            truncated: trail.is_empty(),
            leading: vec![],
            trailing: vec![],
            core_ops: 0..0,
        }
    }

    #[test]
    fn exrec_goodness_examples() {
        let v = check_exrec_good(&exrec(spec(GadgetKind::Prep(LogicalTarget::Zero), 0.1), &[], &[0.3]));
        assert!(v.good);
        assert!((v.margin - (SQRT_PI / 2.0 - 0.4)).abs() < 1e-15);
        assert!((v.margin - 0.486).abs() < 1e-3);

        let th = SQRT_PI / 38.0;
        let se = 6.0 * th;
        let sum = GadgetKind::Gate(GateKind::Sum { control: 0, target: 1 });
        let v = check_exrec_good(&exrec(spec(sum.clone(), th), &[se, se], &[se]));
        assert!(!v.good);
        assert_eq!(v.margin, 0.0);

        let s = SQRT_PI / 2.0 + 0.01 - 0.2 - 0.2 - 0.1;
        let v = check_exrec_good(&exrec(spec(sum, s), &[0.2, 0.2], &[0.1]));
        assert!(!v.good);
        assert!((v.margin + 0.01).abs() < 1e-12);

        let v = check_exrec_good(&exrec(spec(GadgetKind::Meas(Basis::Z), 0.3), &[0.6], &[]));
        assert!(!v.good);
        let v = check_exrec_good(&exrec(spec(GadgetKind::Meas(Basis::Z), 0.3), &[0.5], &[5.0]));
        assert!(v.good, "measurement ExRecs never look at trailing ECs");
        let v = check_exrec_good(&exrec(spec(GadgetKind::Meas(Basis::Z), 0.3), &[0.3], &[]));
        assert!(v.good);
    }

    #[test]
    fn parse_roundtrip_and_validation() {
        let text = "t=0 q=0 op=prep target=0\nt=0 q=1 op=prep target=y\nt=1 q=0,1 op=cnot\nt=2 q=0 op=h\nt=2 q=1 op=s\nt=3 q=0 op=measure basis=x\nt=3 q=1 op=measure\n";
        let qc = QubitCircuit::parse(text).unwrap();
        assert_eq!((qc.width, qc.depth, qc.locations.len()), (2, 4, 7));
        assert_eq!(QubitCircuit::parse(&qc.to_text()).unwrap(), qc);
        assert!(QubitCircuit::parse("t=0 q=0 op=prep\nt=1 q=0 op=h\nt=1 q=0 op=x\n").is_err());
        assert!(QubitCircuit::parse("t=0 q=0 op=prep\nt=0 q=1 op=prep\nt=1 q=0 op=h\n").is_err());
        assert!(QubitCircuit::parse("t=0 q=0 op=prep\nt=1 q=0 op=measure\nt=2 q=0 op=h\n").is_err());
        assert!(matches!(QubitCircuit::parse("t=0 q=0 op=prep\nt=1 q=0 op=toffoli\n"), Err(SimError::UnsupportedGate(_))));
        assert!(QubitCircuit::parse("t=0 q=0 op=prep colour=red\n").is_err());
    }

    #[test]
    fn ideal_distribution_oracle() {
        let qc = QubitCircuit::parse("t=0 q=0 op=prep\nt=0 q=1 op=prep\nt=1 q=0 op=h\nt=1 q=1 op=i\nt=2 q=0,1 op=cnot\nt=3 q=0 op=mz\nt=3 q=1 op=mz\n").unwrap();
        let d = qc.ideal_distribution();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[3] - 0.5).abs() < 1e-12);
        let qc = QubitCircuit::parse("t=0 q=0 op=prep target=y\nt=1 q=0 op=s\nt=2 q=0 op=h\nt=3 q=0 op=mz\n").unwrap();
        // S|Y> = |->, and H|-> = |1>
        assert!((qc.ideal_distribution()[1] - 1.0).abs() < 1e-12);
        let qc = QubitCircuit::parse("t=0 q=0 op=prep target=pi8\nt=1 q=0 op=t\nt=2 q=0 op=t\nt=3 q=0 op=mx\n").unwrap();
        // T^2 T|+> = e^{i3pi/4} phase: P(+) = cos^2(3pi/8)
        assert!((qc.ideal_distribution()[0] - (3.0 * std::f64::consts::PI / 8.0).cos().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn exrec_partition_counts() {
        let qc = QubitCircuit::parse("t=0 q=0 op=prep\nt=1 q=0 op=h\nt=2 q=0 op=measure\n").unwrap();
        let ft = build_ft_circuit(&qc, FtParams::uniform(0.01, 0.01, 0.01)).unwrap();
        assert_eq!(ft.exrecs.len(), 3);
        assert_eq!(ft.ecs.len(), 2);
        assert!(ft.exrecs[0].leading.is_empty() && ft.exrecs[0].trailing.len() == 1);
        assert!(ft.exrecs[2].trailing.is_empty() && ft.exrecs[2].is_measurement());
        assert!(ft.exrecs.iter().all(|e| !e.truncated));
        assert_eq!(ft.l_max(), 10);

        let qc = QubitCircuit::parse("t=0 q=0 op=prep\nt=0 q=1 op=prep\nt=1 q=0,1 op=cnot\nt=2 q=0 op=mz\nt=2 q=1 op=i\n").unwrap();
        let ft = build_ft_circuit(&qc, FtParams::uniform(0.01, 0.01, 0.01)).unwrap();
        let cx = ft.exrecs.iter().find(|e| e.core.lines.len() == 2).unwrap();
        assert_eq!((cx.leading.len(), cx.trailing.len()), (2, 2));
        assert!(ft.exrecs.last().unwrap().truncated);
        assert_eq!(ft.l_max(), 19);
        assert_eq!(ft.outputs.len(), 1);
    }

    #[test]
    fn t_expands_to_teleportation_with_conditional_s() {
        let qc = QubitCircuit::parse("t=0 q=0 op=prep\nt=1 q=0 op=t\nt=2 q=0 op=mx\n").unwrap();
        let ft = build_ft_circuit(&qc, FtParams::uniform(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(ft.catalyst, Some(1));
        assert_eq!(ft.lines, 3);
        let conds: Vec<_> = ft.locations.iter().filter(|l| l.cond.is_some()).collect();
        assert_eq!(conds.len(), 4);
        let magic_meas = ft.ops.iter().find_map(|o| match o.op {
            CvOp::Meas { slot, .. } if !o.in_ec => Some(slot),
            _ => None,
        });
        assert_eq!(conds[0].cond, magic_meas);
        assert_eq!(ft.measurements.len(), 1);
    }

    #[test]
    fn ell_of_ec_wiring() {
        let (ops, out) = knill_ec_ops(0, 1, &EcParams::uniform(0.0));
        assert_eq!(ops.len(), 10);
        let qc = QubitCircuit::parse("t=0 q=0 op=prep\nt=1 q=0 op=i\n").unwrap();
        let ft = build_ft_circuit(&qc, FtParams::uniform(0.0, 0.0, 0.0)).unwrap();
        let out_depth = ft.depths()[ft.ecs[0].ops.clone()]
            .iter()
            .flatten()
            .filter(|(m, _)| *m == ft.ecs[0].output_mode)
            .map(|(_, d)| *d)
            .max();
        assert_eq!(out_depth, Some(EC_OUTPUT_DEPTH));
        assert_eq!(out, 2);
        assert_eq!(ft.ell(), EC_OUTPUT_DEPTH + 1);
    }

    #[test]
    fn frame_propagation_rules() {
        let mut f = PauliFrame::default();
        f.set(0, true, false);
        f.propagate(&GateKind::Fourier, &[0]);
        assert_eq!(f.get(0), (false, true));
        f.set(1, true, true);
        f.propagate(&GateKind::Sum { control: 1, target: 0 }, &[1, 0]);
        assert_eq!(f.get(0), (true, true));
        assert_eq!(f.get(1), (true, false));
        assert_eq!(f.correct(1, Basis::Z, 0), 1);
        assert_eq!(f.correct(1, Basis::X, 0), 0);
    }

    fn y_state(s: f64) -> SssState {
        make_s_state_unchecked(LogicalTarget::Y, &EnvelopeSpec::bump(s), grid16()).unwrap()
    }

    #[test]
    fn knill_ec_ideal_preserves_logical_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = y_state(0.1);
        let before = ideal_decode(&input, 0).unwrap();
        let p = EcParams::uniform(0.0);
        for key in 0..4 {
            let out = run_knill_ec(&input, 0, &p, &NoiseAssignment::ideal(), key, &mut rng).unwrap();
            assert_eq!(out.state.modes(), 1);
            let after = ideal_decode(&out.state, 0).unwrap().pauli(out.frame.0, out.frame.1);
            assert!(after.distance(&before) < 1e-8);
            let s_out = p.s_out().max(0.5 * grid16().delta()) + 1e-9;
            assert!(out.state.filter_radius(0, s_out).distance(&out.state).unwrap() < 1e-12);
        }
    }

    #[test]
    fn knill_ec_large_injection_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid16();
        let zero = make_s_state_unchecked(LogicalTarget::Zero, &EnvelopeSpec::bump(0.05), g).unwrap();
        let noise = NoiseAssignment::ideal().inject(4, 0.6 * SQRT_PI, 0.0);
        let out = run_knill_ec(&zero, 0, &EcParams::uniform(0.0), &noise, 0, &mut rng).unwrap();
        let after = ideal_decode(&out.state, 0).unwrap().pauli(out.frame.0, out.frame.1);
        assert!((after.prob(1) - 1.0).abs() < 1e-8, "0.6c rounds to one c: logical X");
    }

    #[test]
    fn catalytic_s_acts_and_restores_catalyst() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = grid16();
        let data = y_state(0.2);
        let cat = y_state(0.1);
        let st = data.tensor(&cat).unwrap();
        let once = run_catalytic_s(&st, 0, 1, &mut rng).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let want = QubitDensity::pure(c(h, 0.0), c(-h, 0.0));
        assert!(ideal_decode(&once, 0).unwrap().distance(&want) < 1e-6);
        let y = QubitDensity::pure(c(h, 0.0), c(0.0, h));
        assert!(ideal_decode(&once, 1).unwrap().distance(&y) < 1e-6);
        // reuse the catalyst on a fresh |0>
        let zero = make_s_state_unchecked(LogicalTarget::Zero, &EnvelopeSpec::bump(0.1), g).unwrap();
        let st2 = logical_reuse(&once, &zero);
        let twice = run_catalytic_s(&st2, 2, 1, &mut rng).unwrap();
        assert!(ideal_decode(&twice, 2).unwrap().distance(&QubitDensity::pure(c(1.0, 0.0), c(0.0, 0.0))) < 1e-6);
        assert!(ideal_decode(&twice, 1).unwrap().distance(&y) < 1e-6);
    }

    fn logical_reuse(a: &SssState, b: &SssState) -> SssState {
        a.tensor(b).unwrap()
    }

    #[test]
    fn teleported_t_both_branches() {
        let g = grid16();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = make_s_state_unchecked(LogicalTarget::plus(), &EnvelopeSpec::bump(0.1), g).unwrap();
        let magic = make_s_state_unchecked(LogicalTarget::PiOver8, &EnvelopeSpec::bump(0.1), g).unwrap();
        let st = plus.tensor(&magic).unwrap().tensor(&y_state(0.1)).unwrap();
        let want = QubitDensity::pure(c(h, 0.0), C64::from_polar(h, std::f64::consts::FRAC_PI_4));
        let mut seen = [false; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..40 {
            let (out, bit) = run_teleport_t(&st, 0, 1, 2, &mut rng).unwrap();
            assert_eq!(out.modes(), 2);
            assert!(ideal_decode(&out, 0).unwrap().distance(&want) < 1e-6, "branch {bit}");
            seen[bit as usize] = true;
            if seen[0] && seen[1] {
                break;
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn ft_circuit_outcomes_match_ideal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = grid16();
        let text = "t=0 q=0 op=prep\nt=0 q=1 op=prep\nt=1 q=0 op=x\nt=1 q=1 op=h\nt=2 q=0,1 op=cnot\nt=3 q=0 op=mz\nt=3 q=1 op=mx\n";
        let qc = QubitCircuit::parse(text).unwrap();
        let ft = build_ft_circuit(&qc, FtParams::uniform(0.02, 0.02, 0.02)).unwrap();
        let ideal = qc.ideal_distribution();
        for key in 0..3 {
            let run = run_exact(&ft, g, NoiseAssignment::declared(), key, &mut rng).unwrap();
            let idx = (run.outcomes[0] as usize) << 1 | run.outcomes[1] as usize;
            assert!(ideal[idx] > 0.99, "{:?}", run.outcomes);
        }
    }

    #[test]
    fn frame_tracking_matches_explicit_corrections() {
        let g = grid16();
        let qc = QubitCircuit::parse("t=0 q=0 op=prep\nt=0 q=1 op=prep\nt=1 q=0 op=h\nt=1 q=1 op=x\nt=2 q=0 op=h\nt=2 q=1 op=i\nt=3 q=0 op=mz\nt=3 q=1 op=mz\n").unwrap();
        let ft = build_ft_circuit(&qc, FtParams::uniform(0.02, 0.02, 0.02)).unwrap();
        for key in 0..3 {
            let mut a = ExactSim::new(g, NoiseAssignment::declared(), key);
            let mut b = ExactSim::new(g, NoiseAssignment::declared(), key);
            b.explicit_corrections = true;
            a.run(&ft.ops, 0, &mut ChaCha8Rng::seed_from_u64(key)).unwrap();
            b.run(&ft.ops, 0, &mut ChaCha8Rng::seed_from_u64(key + 100)).unwrap();
            for m in &ft.measurements {
                assert_eq!(a.slot(m.slot), b.slot(m.slot));
            }
        }
    }

    #[test]
    fn channel_ec_output_independent_of_input() {
        let g = grid16();
        let p = EcParams::uniform(0.15);
        let env = bump_envelopes();
        let inputs = [
            make_s_state_unchecked(LogicalTarget::Zero, &EnvelopeSpec::bump(0.1), g).unwrap(),
            y_state(0.4),
        ];
        let mut dens = Vec::new();
        for inp in &inputs {
            let mix = run_knill_ec_channel(inp, 0, &p, &env).unwrap();
            assert!((mix.total_weight() - 1.0).abs() < 1e-10);
            let mut probs = vec![0.0; 2 * g.n() * g.n() * g.n()];
            for (w, m) in &mix.members {
                for (i, (_, pr)) in homodyne_distribution(m, 2, Quadrature::Q).unwrap().iter().enumerate() {
                    probs[i] += w * pr;
                }
            }
            dens.push(probs);
        }
        let diff: f64 = dens[0].iter().zip(&dens[1]).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff < 1e-10, "{diff}");
    }
}
