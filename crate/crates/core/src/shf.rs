//! Superhyperfine structure of a central ion coupled to a few neighbor
//! spin-1/2 nuclei, and the optical transition strengths between the ground
//! and excited manifolds under a frozen-nuclear-spin optical operator.
//!
//! Basis: bit k of a basis index is 0 when nucleus k is up (m = +½).
//! All energies are in Hz.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, FieldError, Result};

pub const MAX_NUCLEI: usize = 8;
/// ¹⁹F gyromagnetic ratio / 2π in Hz per tesla.
pub const FLUORINE_GAMMA_HZ_PER_T: f64 = 40.0776e6;
pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_EXCITED_SCALE: f64 = 0.5;
pub const DEFAULT_EXCITED_TILT_DEG: f64 = 30.0;
/// Side-hole lines closer than this (Hz) are merged.
const LINE_MERGE_HZ: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElectronicState {
    Ground,
    Excited,
}

/// How a nucleus's local field changes in the excited electronic state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitedChange {
    pub scale: f64,
    /// Rotation angle (rad) of the local field away from its ground direction.
    pub tilt: f64,
}

impl Default for ExcitedChange {
    fn default() -> Self {
        Self {
            scale: DEFAULT_EXCITED_SCALE,
            tilt: DEFAULT_EXCITED_TILT_DEG.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinCluster {
    /// Ground-state local field on each nucleus (Hz).
    pub ground_couplings: Vec<[f64; 3]>,
    pub excited: Vec<ExcitedChange>,
    /// Symmetric nucleus–nucleus couplings (Hz), zero diagonal.
    pub nucleus_couplings: Vec<Vec<f64>>,
    /// Larmor frequency of each nucleus (Hz).
    pub zeeman: Vec<f64>,
}

impl SpinCluster {
    /// Uncoupled nuclei in a common Larmor frequency.
    pub fn uncoupled(n: usize, larmor: f64) -> Self {
        Self {
            ground_couplings: vec![[0.0; 3]; n],
            excited: vec![ExcitedChange::default(); n],
            nucleus_couplings: vec![vec![0.0; n]; n],
            zeeman: vec![larmor; n],
        }
    }

    pub fn n_nuclei(&self) -> usize {
        self.ground_couplings.len()
    }

    pub fn dim(&self) -> usize {
        1 << self.n_nuclei()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nuclei();
        if n > MAX_NUCLEI {
            return Err(Error::DimensionCap { n, max: MAX_NUCLEI });
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cluster needs at least one nucleus".into()));
        }
        if self.excited.len() != n || self.zeeman.len() != n || self.nucleus_couplings.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} ground couplings but {} excited entries, {} Larmor frequencies and {} coupling rows",
                self.excited.len(),
                self.zeeman.len(),
                self.nucleus_couplings.len()
            )));
        }
        for (k, row) in self.nucleus_couplings.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch(format!("coupling row {k} has {} entries", row.len())));
            }
            for (l, &x) in row.iter().enumerate() {
                ensure_finite(x, "nucleus coupling")?;
                if k == l && x != 0.0 {
                    return Err(Error::InvalidArgument(format!("self-coupling of nucleus {k} must be 0")));
                }
                if x != self.nucleus_couplings[l][k] {
                    return Err(Error::InvalidArgument(format!("coupling table not symmetric at ({k}, {l})")));
                }
            }
        }
        for b in &self.ground_couplings {
            for &x in b {
                ensure_finite(x, "ion-nucleus coupling")?;
            }
        }
        for e in &self.excited {
            ensure_finite(e.scale, "excited scale")?;
            ensure_finite(e.tilt, "excited tilt")?;
        }
        for &z in &self.zeeman {
            ensure_finite(z, "Larmor frequency")?;
        }
        Ok(())
    }

    /// Local fields in the given electronic state.
    pub fn local_fields(&self, state: ElectronicState) -> Vec<[f64; 3]> {
        match state {
            ElectronicState::Ground => self.ground_couplings.clone(),
            ElectronicState::Excited => self
                .ground_couplings
                .iter()
                .zip(&self.excited)
                .map(|(b, e)| excited_field(*b, *e))
                .collect(),
        }
    }

    pub fn with_larmor(mut self, larmor: f64) -> Self {
        self.zeeman.iter_mut().for_each(|z| *z = larmor);
        self
    }
}

fn excited_field(b: [f64; 3], e: ExcitedChange) -> [f64; 3] {
    // Tilt about b × ẑ, or about ŷ when b lies along ẑ.
    let mut axis = [b[1], -b[0], 0.0];
    let norm = (axis[0] * axis[0] + axis[1] * axis[1]).sqrt();
    if norm <= 1e-12 * (b[0].abs() + b[1].abs() + b[2].abs()).max(f64::MIN_POSITIVE) || norm == 0.0 {
        axis = [0.0, 1.0, 0.0];
    } else {
        axis = [axis[0] / norm, axis[1] / norm, 0.0];
    }
    let (s, c) = e.tilt.sin_cos();
    let kdotb = axis[0] * b[0] + axis[1] * b[1] + axis[2] * b[2];
    let cross = [
        axis[1] * b[2] - axis[2] * b[1],
        axis[2] * b[0] - axis[0] * b[2],
        axis[0] * b[1] - axis[1] * b[0],
    ];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = e.scale * (b[i] * c + cross[i] * s + axis[i] * kdotb * (1.0 - c));
    }
    out
}

fn m_of(index: usize, k: usize) -> f64 {
    if index >> k & 1 == 0 {
        0.5
    } else {
        -0.5
    }
}

/// Spin Hamiltonian (Hz) of the cluster in one electronic state.
///
/// H = Σ_k ν_k I_z,k + Σ_k b_k · I_k + Σ_{k<l} J_kl [I_z,k I_z,l − ¼(I₊,k I₋,l + I₋,k I₊,l)]
pub fn build_hamiltonian(cluster: &SpinCluster, state: ElectronicState) -> Result<DMatrix<Complex64>> {
    cluster.validate()?;
    let n = cluster.n_nuclei();
    let dim = cluster.dim();
    let fields = cluster.local_fields(state);
    let mut h = DMatrix::<Complex64>::zeros(dim, dim);
    for i in 0..dim {
        let mut diag = 0.0;
        for k in 0..n {
            let m = m_of(i, k);
            diag += (cluster.zeeman[k] + fields[k][2]) * m;
            for l in (k + 1)..n {
                diag += cluster.nucleus_couplings[k][l] * m * m_of(i, l);
            }
        }
        h[(i, i)] = Complex64::new(diag, 0.0);
        for k in 0..n {
            // Transverse local field: <down|b·I|up> = (bx + i by)/2.
            if i >> k & 1 == 0 {
                let j = i | (1 << k);
                let el = Complex64::new(0.5 * fields[k][0], 0.5 * fields[k][1]);
                h[(j, i)] += el;
                h[(i, j)] += el.conj();
            }
            for l in (k + 1)..n {
                let jkl = cluster.nucleus_couplings[k][l];
                if jkl == 0.0 {
                    continue;
                }
                // Flip-flop connects up/down with down/up on the pair.
                if (i >> k & 1) != (i >> l & 1) {
                    let j = i ^ (1 << k) ^ (1 << l);
                    h[(i, j)] += Complex64::new(-0.25 * jkl, 0.0);
                }
            }
        }
    }
    Ok(h)
}

/// Ascending eigenvalues and matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct Manifold {
    pub energies: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
}

pub fn manifold_levels(h: &DMatrix<Complex64>) -> Result<Manifold> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch(format!("{}x{} matrix is not square", h.nrows(), h.ncols())));
    }
    if h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("Hamiltonian"));
    }
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let energies = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(Manifold { energies, vectors })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideHoleLine {
    pub offset_hz: f64,
    pub relative_strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayReport {
    /// strengths[i][j] = |⟨e_j|g_i⟩|².
    pub strengths: Vec<Vec<f64>>,
    pub pathway_count: usize,
    pub threshold: f64,
    pub side_hole: Vec<SideHoleLine>,
    /// Mean strength carried away from each ground level's main line.
    pub side_hole_weight: f64,
    pub ground_energies_hz: Vec<f64>,
    pub excited_energies_hz: Vec<f64>,
}

/// Overlap table between the two manifolds and derived pathway statistics.
pub fn transition_strengths(ground: &Manifold, excited: &Manifold, threshold: f64) -> Result<PathwayReport> {
    let dim = ground.energies.len();
    if excited.energies.len() != dim || ground.vectors.nrows() != excited.vectors.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "ground manifold has {dim} levels, excited has {}",
            excited.energies.len()
        )));
    }
    ensure_finite(threshold, "pathway threshold")?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let mut strengths = vec![vec![0.0; dim]; dim];
    for (i, row) in strengths.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            let mut z = Complex64::new(0.0, 0.0);
            for r in 0..dim {
                z += excited.vectors[(r, j)].conj() * ground.vectors[(r, i)];
            }
            *s = z.norm_sqr();
        }
    }
    let max = strengths.iter().flatten().cloned().fold(0.0, f64::max);
    let pathway_count = strengths.iter().flatten().filter(|&&s| s >= threshold * max).count();

    // Equal ground populations: average each row's spectrum about its main line.
    let mut lines: Vec<(f64, f64)> = Vec::with_capacity(dim * dim);
    let mut main_sum = 0.0;
    for row in &strengths {
        let main = (0..dim).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
        main_sum += row[main];
        for (j, &s) in row.iter().enumerate() {
            lines.push((excited.energies[j] - excited.energies[main], s / dim as f64));
        }
    }
    lines.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut side_hole: Vec<SideHoleLine> = Vec::new();
    for (off, s) in lines {
        match side_hole.last_mut() {
            Some(last) if (off - last.offset_hz).abs() <= LINE_MERGE_HZ => last.relative_strength += s,
            _ => side_hole.push(SideHoleLine {
                offset_hz: off,
                relative_strength: s,
            }),
        }
    }
    Ok(PathwayReport {
        strengths,
        pathway_count,
        threshold,
        side_hole,
        side_hole_weight: 1.0 - main_sum / dim as f64,
        ground_energies_hz: ground.energies.clone(),
        excited_energies_hz: excited.energies.clone(),
    })
}

/// Builds both manifolds and their transition table.
pub fn analyze(cluster: &SpinCluster, threshold: f64) -> Result<PathwayReport> {
    let g = manifold_levels(&build_hamiltonian(cluster, ElectronicState::Ground)?)?;
    let e = manifold_levels(&build_hamiltonian(cluster, ElectronicState::Excited)?)?;
    transition_strengths(&g, &e, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub counts: Vec<usize>,
    pub side_hole_weights: Vec<f64>,
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

/// Pathway counts over a set of cluster variants.
pub fn neighbor_robustness(variants: &[SpinCluster], threshold: f64) -> Result<RobustnessReport> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no cluster variants given".into()));
    }
    let reports = variants
        .iter()
        .map(|c| analyze(c, threshold))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = reports.iter().map(|r| r.pathway_count).collect();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) as f64
    };
    Ok(RobustnessReport {
        side_hole_weights: reports.iter().map(|r| r.side_hole_weight).collect(),
        min: sorted[0],
        max: sorted[m - 1],
        median,
        counts,
    })
}

/// Five-fluorine cluster with representative magnitudes (ion–F local fields
/// of order 10 kHz, F–F couplings 1–10 kHz) in a 500 G field. The numbers
/// are illustrative, not derived from crystal positions.
pub fn laf3_like_preset() -> SpinCluster {
    let khz = 1e3;
    let ground = vec![
        [3.0 * khz, 1.0 * khz, 9.5 * khz],
        [-6.0 * khz, 4.0 * khz, -7.0 * khz],
        [8.0 * khz, -5.5 * khz, 2.0 * khz],
        [-2.5 * khz, -8.0 * khz, 5.5 * khz],
        [5.0 * khz, 6.5 * khz, -6.0 * khz],
    ];
    let pairs = [
        (0, 1, 6.0),
        (0, 2, 2.5),
        (0, 3, 1.5),
        (0, 4, 8.0),
        (1, 2, 3.5),
        (1, 3, 9.0),
        (1, 4, 1.2),
        (2, 3, 4.5),
        (2, 4, 2.0),
        (3, 4, 5.5),
    ];
    let mut nn = vec![vec![0.0; 5]; 5];
    for (k, l, j) in pairs {
        nn[k][l] = j * khz;
        nn[l][k] = j * khz;
    }
    SpinCluster {
        ground_couplings: ground,
        excited: vec![ExcitedChange::default(); 5],
        nucleus_couplings: nn,
        zeeman: vec![larmor_from_gauss(500.0); 5],
    }
}

pub fn larmor_from_gauss(gauss: f64) -> f64 {
    FLUORINE_GAMMA_HZ_PER_T * gauss * 1e-4
}

/// Resamples couplings within the representative ranges, keeping the
/// Larmor frequencies and excited-state changes of `base`: local-field
/// magnitudes uniform in 5–15 kHz with isotropic directions, F–F couplings
/// log-uniform in 1–10 kHz.
pub fn resample_variants(base: &SpinCluster, count: usize, seed: u64) -> Vec<SpinCluster> {
    let n = base.n_nuclei();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let ground = (0..n)
                .map(|_| {
                    let mag = rng.random_range(5e3..15e3);
                    let cos_t: f64 = rng.random_range(-1.0..1.0);
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let sin_t = (1.0 - cos_t * cos_t).sqrt();
                    [mag * sin_t * phi.cos(), mag * sin_t * phi.sin(), mag * cos_t]
                })
                .collect();
            let mut nn = vec![vec![0.0; n]; n];
            for k in 0..n {
                for l in (k + 1)..n {
                    let j = 10f64.powf(rng.random_range(3.0..4.0));
                    nn[k][l] = j;
                    nn[l][k] = j;
                }
            }
            SpinCluster {
                ground_couplings: ground,
                excited: base.excited.clone(),
                nucleus_couplings: nn,
                zeeman: base.zeeman.clone(),
            }
        })
        .collect()
}

/// Writes `offset_hz,relative_strength` rows.
pub fn write_side_hole_csv<W: Write>(mut w: W, lines: &[SideHoleLine], comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "offset_hz,relative_strength")?;
    for l in lines {
        writeln!(w, "{:e},{:e}", l.offset_hz, l.relative_strength)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitedDoc {
    pub scale: f64,
    pub tilt_deg: f64,
}

/// External form of a [`SpinCluster`] (kHz, degrees, gauss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDoc {
    pub ground_couplings_khz: Vec<[f64; 3]>,
    /// One entry per nucleus, or omitted for the defaults.
    #[serde(default)]
    pub excited: Option<Vec<ExcitedDoc>>,
    /// Full symmetric table, or omitted for no nucleus–nucleus coupling.
    #[serde(default)]
    pub nucleus_couplings_khz: Option<Vec<Vec<f64>>>,
    /// Applied field; sets every Larmor frequency from the ¹⁹F ratio.
    #[serde(default)]
    pub field_gauss: Option<f64>,
    /// Explicit per-nucleus Larmor frequencies; overrides `field_gauss`.
    #[serde(default)]
    pub larmor_khz: Option<Vec<f64>>,
}

impl ClusterDoc {
    pub fn to_cluster(&self) -> Result<SpinCluster> {
        let n = self.ground_couplings_khz.len();
        if n > MAX_NUCLEI {
            return Err(Error::DimensionCap { n, max: MAX_NUCLEI });
        }
        let mut errs = Vec::new();
        if let Some(e) = &self.excited {
            if e.len() != n {
                errs.push(FieldError::new("excited", format!("expected {n} entries, got {}", e.len())));
            }
        }
        if let Some(t) = &self.nucleus_couplings_khz {
            if t.len() != n || t.iter().any(|r| r.len() != n) {
                errs.push(FieldError::new("nucleus_couplings_khz", format!("expected a {n}x{n} table")));
            }
        }
        if let Some(l) = &self.larmor_khz {
            if l.len() != n {
                errs.push(FieldError::new("larmor_khz", format!("expected {n} entries, got {}", l.len())));
            }
        }
        if self.larmor_khz.is_none() && self.field_gauss.is_none() {
            errs.push(FieldError::new("field_gauss", "give field_gauss or larmor_khz"));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let zeeman = match &self.larmor_khz {
            Some(l) => l.iter().map(|x| x * 1e3).collect(),
            None => vec![larmor_from_gauss(self.field_gauss.unwrap_or(0.0)); n],
        };
        let c = SpinCluster {
            ground_couplings: self
                .ground_couplings_khz
                .iter()
                .map(|b| [b[0] * 1e3, b[1] * 1e3, b[2] * 1e3])
                .collect(),
            excited: match &self.excited {
                Some(e) => e
                    .iter()
                    .map(|x| ExcitedChange {
                        scale: x.scale,
                        tilt: x.tilt_deg.to_radians(),
                    })
                    .collect(),
                None => vec![ExcitedChange::default(); n],
            },
            nucleus_couplings: match &self.nucleus_couplings_khz {
                Some(t) => t.iter().map(|r| r.iter().map(|x| x * 1e3).collect()).collect(),
                None => vec![vec![0.0; n]; n],
            },
            zeeman,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_cluster(c: &SpinCluster) -> Self {
        Self {
            ground_couplings_khz: c.ground_couplings.iter().map(|b| [b[0] / 1e3, b[1] / 1e3, b[2] / 1e3]).collect(),
            excited: Some(
                c.excited
                    .iter()
                    .map(|e| ExcitedDoc {
                        scale: e.scale,
                        tilt_deg: e.tilt.to_degrees(),
                    })
                    .collect(),
            ),
            nucleus_couplings_khz: Some(
                c.nucleus_couplings.iter().map(|r| r.iter().map(|x| x / 1e3).collect()).collect(),
            ),
            field_gauss: None,
            larmor_khz: Some(c.zeeman.iter().map(|z| z / 1e3).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn hermiticity_defect(h: &DMatrix<Complex64>) -> f64 {
        (h - h.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn uncoupled_spectrum_is_a_binomial_ladder() {
        let c = SpinCluster::uncoupled(4, 1e6);
        let m = manifold_levels(&build_hamiltonian(&c, ElectronicState::Ground).unwrap()).unwrap();
        // Levels (2 - k)·ν with multiplicity C(4, k).
        let mut want = Vec::new();
        for (k, mult) in [(0, 1), (1, 4), (2, 6), (3, 4), (4, 1)] {
            for _ in 0..mult {
                want.push((k as f64 - 2.0) * 1e6);
            }
        }
        for (a, b) in m.energies.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let c = laf3_like_preset();
        for s in [ElectronicState::Ground, ElectronicState::Excited] {
            let h = build_hamiltonian(&c, s).unwrap();
            assert_eq!(hermiticity_defect(&h), 0.0);
        }
    }

    #[test]
    fn two_nucleus_closed_form() {
        // Nucleus 0 sees a longitudinal field a; the pair is coupled by J.
        let (nu, a, j) = (2.0e6, 9e3, 4e3);
        let c = SpinCluster {
            ground_couplings: vec![[0.0, 0.0, a], [0.0, 0.0, 0.0]],
            excited: vec![ExcitedChange::default(); 2],
            nucleus_couplings: vec![vec![0.0, j], vec![j, 0.0]],
            zeeman: vec![nu, nu],
        };
        let m = manifold_levels(&build_hamiltonian(&c, ElectronicState::Ground).unwrap()).unwrap();
        let r = ((a / 2.0).powi(2) + (j / 4.0).powi(2)).sqrt();
        let mut want = [nu + a / 2.0 + j / 4.0, -nu - a / 2.0 + j / 4.0, -j / 4.0 + r, -j / 4.0 - r];
        want.sort_by(f64::total_cmp);
        for (x, y) in m.energies.iter().zip(want) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn single_nucleus_with_transverse_field() {
        let (nu, b) = (1.0e5, [3e4, -4e4, 2e4]);
        let c = SpinCluster {
            ground_couplings: vec![b],
            excited: vec![ExcitedChange::default()],
            nucleus_couplings: vec![vec![0.0]],
            zeeman: vec![nu],
        };
        let m = manifold_levels(&build_hamiltonian(&c, ElectronicState::Ground).unwrap()).unwrap();
        let half = 0.5 * ((nu + b[2]).powi(2) + b[0] * b[0] + b[1] * b[1]).sqrt();
        assert_relative_eq!(m.energies[0], -half, max_relative = 1e-12);
        assert_relative_eq!(m.energies[1], half, max_relative = 1e-12);
    }

    #[test]
    fn diagonal_matrix_levels() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            Complex64::new(3.0, 0.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(2.0, 0.0),
        ]));
        let m = manifold_levels(&h).unwrap();
        assert_eq!(m.energies, vec![-1.0, 2.0, 3.0]);
        for c in 0..3 {
            let nz: Vec<usize> = (0..3).filter(|&r| m.vectors[(r, c)].norm() > 1e-12).collect();
            assert_eq!(nz.len(), 1);
            assert!((m.vectors[(nz[0], c)].norm() - 1.0).abs() < 1e-12);
        }
    }

    fn unitarity_defect(v: &DMatrix<Complex64>) -> f64 {
        let p = v.adjoint() * v;
        let n = p.nrows();
        (p - DMatrix::<Complex64>::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn preset_levels_are_orthonormal_and_trace_preserving() {
        let c = laf3_like_preset();
        let h = build_hamiltonian(&c, ElectronicState::Excited).unwrap();
        let m = manifold_levels(&h).unwrap();
        assert!(unitarity_defect(&m.vectors) <= 1e-10);
        let tr: f64 = (0..h.nrows()).map(|k| h[(k, k)].re).sum();
        let sum: f64 = m.energies.iter().sum();
        assert!((sum - tr).abs() <= 1e-9 * h.iter().map(|z| z.norm()).fold(0.0, f64::max));
        assert!(m.energies.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn degenerate_subspaces_stay_orthonormal() {
        // Uncoupled nuclei plus one flip-flop pair: large degenerate blocks.
        let mut c = SpinCluster::uncoupled(5, 1e6);
        c.nucleus_couplings[0][1] = 3e3;
        c.nucleus_couplings[1][0] = 3e3;
        let m = manifold_levels(&build_hamiltonian(&c, ElectronicState::Ground).unwrap()).unwrap();
        assert!(unitarity_defect(&m.vectors) <= 1e-10);
    }

    #[test]
    fn identical_manifolds_give_identity() {
        let c = laf3_like_preset();
        let g = manifold_levels(&build_hamiltonian(&c, ElectronicState::Ground).unwrap()).unwrap();
        let r = transition_strengths(&g, &g, 0.1).unwrap();
        assert_eq!(r.pathway_count, 32);
        for (i, row) in r.strengths.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-10);
        }
        assert!(r.side_hole_weight.abs() < 1e-10);
    }

    #[test]
    fn preset_has_many_pathways() {
        let r = analyze(&laf3_like_preset(), DEFAULT_THRESHOLD).unwrap();
        assert!(r.pathway_count > 15, "{}", r.pathway_count);
        for row in &r.strengths {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            assert!(row.iter().all(|&s| (0.0..=1.0 + 1e-12).contains(&s)));
        }
        assert!(r.side_hole_weight > 0.0 && r.side_hole_weight <= 0.35, "{}", r.side_hole_weight);
        let total: f64 = r.side_hole.iter().map(|l| l.relative_strength).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn reciprocity_gives_transpose() {
        let c = laf3_like_preset();
        let g = manifold_levels(&build_hamiltonian(&c, ElectronicState::Ground).unwrap()).unwrap();
        let e = manifold_levels(&build_hamiltonian(&c, ElectronicState::Excited).unwrap()).unwrap();
        let a = transition_strengths(&g, &e, 0.1).unwrap();
        let b = transition_strengths(&e, &g, 0.1).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(a.strengths[i][j], b.strengths[j][i]);
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let c = SpinCluster::uncoupled(9, 1e6);
        assert!(matches!(build_hamiltonian(&c, ElectronicState::Ground), Err(Error::DimensionCap { n: 9, .. })));
        let a = manifold_levels(&build_hamiltonian(&SpinCluster::uncoupled(2, 1.0), ElectronicState::Ground).unwrap()).unwrap();
        let b = manifold_levels(&build_hamiltonian(&SpinCluster::uncoupled(3, 1.0), ElectronicState::Ground).unwrap()).unwrap();
        assert!(matches!(transition_strengths(&a, &b, 0.1), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn zero_coupled_variants_count_everything() {
        let vs = vec![SpinCluster::uncoupled(5, 2e6); 3];
        let r = neighbor_robustness(&vs, 0.1).unwrap();
        assert_eq!(r.counts, vec![32, 32, 32]);
        let one = neighbor_robustness(&vs[..1], 0.1).unwrap();
        assert_eq!(one.counts.len(), 1);
    }

    #[test]
    fn excited_field_rotation() {
        let b = [0.0, 0.0, 10.0];
        let e = excited_field(b, ExcitedChange { scale: 0.5, tilt: std::f64::consts::FRAC_PI_2 });
        // About ŷ: ẑ goes to x̂.
        assert!((e[0] - 5.0).abs() < 1e-12 && e[1].abs() < 1e-12 && e[2].abs() < 1e-12);
        let b = [3.0, 4.0, 0.0];
        let e = excited_field(b, ExcitedChange { scale: 1.0, tilt: 0.3 });
        let norm = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        assert_relative_eq!(norm, 5.0, max_relative = 1e-12);
        let cosang = (e[0] * 3.0 + e[1] * 4.0) / 25.0;
        assert_relative_eq!(cosang, 0.3f64.cos(), max_relative = 1e-12);
    }

    #[test]
    fn strong_field_without_pair_coupling_gives_identity() {
        let mut c = laf3_like_preset();
        c.nucleus_couplings = vec![vec![0.0; 5]; 5];
        let weights: Vec<f64> = [500.0, 5e3, 5e4]
            .iter()
            .map(|&g| analyze(&c.clone().with_larmor(larmor_from_gauss(g)), 0.1).unwrap().side_hole_weight)
            .collect();
        assert!(weights[0] > weights[1] && weights[1] > weights[2], "{weights:?}");
        assert!(weights[2] < 1e-5, "{weights:?}");
    }

    #[test]
    fn strong_field_with_pair_coupling_tends_to_secular_table() {
        // Transverse local fields lose their effect; flip-flop mixing stays.
        let c = laf3_like_preset();
        let mut secular = c.clone();
        for b in &mut secular.ground_couplings {
            let r = excited_field(*b, ExcitedChange { scale: 1.0, tilt: 0.0 });
            *b = [0.0, 0.0, r[2]];
        }
        let diffs: Vec<f64> = [500.0, 5e3, 5e4]
            .iter()
            .map(|&g| {
                let nu = larmor_from_gauss(g);
                let a = analyze(&c.clone().with_larmor(nu), 0.1).unwrap();
                // Secular reference uses the longitudinal part of each state's field.
                let mut s = secular.clone().with_larmor(nu);
                let ge = manifold_levels(&build_hamiltonian(&s, ElectronicState::Ground).unwrap()).unwrap();
                s.ground_couplings = c.local_fields(ElectronicState::Excited).iter().map(|b| [0.0, 0.0, b[2]]).collect();
                s.excited = vec![ExcitedChange { scale: 1.0, tilt: 0.0 }; 5];
                let ee = manifold_levels(&build_hamiltonian(&s, ElectronicState::Ground).unwrap()).unwrap();
                let b = transition_strengths(&ge, &ee, 0.1).unwrap();
                a.strengths
                    .iter()
                    .flatten()
                    .zip(b.strengths.iter().flatten())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
        assert!(diffs[2] < 1e-4, "{diffs:?}");
        let lim = analyze(&c.clone().with_larmor(larmor_from_gauss(5e4)), 0.1).unwrap();
        assert!(lim.side_hole_weight > 0.01, "{}", lim.side_hole_weight);
    }

    #[test]
    fn doc_round_trip() {
        let c = laf3_like_preset();
        let doc = ClusterDoc::from_cluster(&c);
        let back = doc.to_cluster().unwrap();
        let r1 = analyze(&c, 0.1).unwrap();
        let r2 = analyze(&back, 0.1).unwrap();
        assert_eq!(r1.pathway_count, r2.pathway_count);
        let bad: std::result::Result<ClusterDoc, _> = serde_json::from_str(r#"{"ground_couplings_khz": [], "bogus": 1}"#);
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn rows_are_complete(seed in 0u64..10_000) {
            let v = &resample_variants(&laf3_like_preset(), 1, seed)[0];
            let r = analyze(v, 0.1).unwrap();
            for row in &r.strengths {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
            let cols: Vec<f64> = (0..32).map(|j| r.strengths.iter().map(|row| row[j]).sum()).collect();
            prop_assert!(cols.iter().all(|c| (c - 1.0).abs() <= 1e-10));
        }
    }
}
