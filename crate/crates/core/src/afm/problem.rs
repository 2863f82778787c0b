//! Penalized AFM log-likelihood, its gradient, and the Newton machinery.
//!
//! Parameters are laid out as `[theta_0..theta_S, beta_0..beta_K,
//! gamma_0..gamma_K, delta?]`. Every observation touches exactly one
//! student, so the student block of the Hessian is diagonal and the Newton
//! system is reduced to the KC block with a Schur complement.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::linalg::SquareMatrix;
use crate::logstore::StudentStepTable;
use crate::math::{sigmoid, softplus};

use super::AfmError;

#[derive(Debug, Clone)]
pub(crate) struct Obs {
    pub student: usize,
    /// (kc index, prior opportunities)
    pub terms: Vec<(usize, f64)>,
    pub y: f64,
    pub treated: f64,
}

/// A student-step table compiled to dense indices.
#[derive(Debug, Clone)]
pub struct AfmData {
    pub(crate) students: Vec<String>,
    pub(crate) kcs: Vec<String>,
    pub(crate) obs: Vec<Obs>,
    pub(crate) kc_counts: Vec<usize>,
    pub(crate) with_condition: bool,
}

impl AfmData {
    /// `treatment`: when set, records tagged with it get the condition
    /// indicator 1 and all other tagged records 0.
    pub fn from_table(table: &StudentStepTable, treatment: Option<&str>) -> Result<Self, AfmError> {
        if table.is_empty() {
            return Err(AfmError::EmptyTable);
        }
        let students: Vec<String> = table.students().iter().cloned().collect();
        let kcs: Vec<String> = table.kcs().iter().cloned().collect();
        let s_index: BTreeMap<&str, usize> =
            students.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let k_index: BTreeMap<&str, usize> =
            kcs.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
        let mut kc_counts = alloc::vec![0usize; kcs.len()];
        let mut obs = Vec::with_capacity(table.len());
        for (i, r) in table.records().iter().enumerate() {
            if r.kcs.is_empty() {
                return Err(AfmError::RecordWithoutKc(i));
            }
            let treated = match treatment {
                None => 0.0,
                Some(t) => match r.condition_tag.as_deref() {
                    None => return Err(AfmError::UntaggedRecord(i)),
                    Some(c) if c == t => 1.0,
                    Some(_) => 0.0,
                },
            };
            let mut terms = Vec::with_capacity(r.kcs.len());
            for kc in &r.kcs {
                let k = k_index[kc.as_str()];
                kc_counts[k] += 1;
                let prior = r.prior_opportunities(kc).ok_or(AfmError::RecordWithoutKc(i))?;
                terms.push((k, f64::from(prior)));
            }
            obs.push(Obs {
                student: s_index[r.student_id.as_str()],
                terms,
                y: if r.is_correct() { 1.0 } else { 0.0 },
                treated,
            });
        }
        Ok(Self { students, kcs, obs, kc_counts, with_condition: treatment.is_some() })
    }

    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    pub fn n_kcs(&self) -> usize {
        self.kcs.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    /// Dimension of the parameter vector.
    pub fn dim(&self) -> usize {
        self.n_students() + self.rest_dim()
    }

    pub(crate) fn rest_dim(&self) -> usize {
        2 * self.n_kcs() + usize::from(self.with_condition)
    }

    pub(crate) fn beta_index(&self, k: usize) -> usize {
        self.n_students() + k
    }

    pub(crate) fn gamma_index(&self, k: usize) -> usize {
        self.n_students() + self.n_kcs() + k
    }

    pub(crate) fn delta_index(&self) -> Option<usize> {
        self.with_condition.then(|| self.n_students() + 2 * self.n_kcs())
    }
}

/// Penalized log-likelihood `LL(x) - l2_theta * sum(theta^2)`.
#[derive(Debug, Clone)]
pub struct AfmProblem {
    pub(crate) data: AfmData,
    pub(crate) l2_theta: f64,
}

pub(crate) struct Curvature {
    /// Diagonal of the negated student block.
    pub d: Vec<f64>,
    /// Student x rest cross block, row-major.
    pub b: Vec<f64>,
    /// Negated rest block.
    pub c: SquareMatrix,
}

impl AfmProblem {
    pub fn new(data: AfmData, l2_theta: f64) -> Self {
        Self { data, l2_theta }
    }

    pub fn data(&self) -> &AfmData {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    #[inline]
    fn eta(&self, x: &[f64], o: &Obs) -> f64 {
        let s = self.data.n_students();
        let k = self.data.n_kcs();
        let mut eta = x[o.student];
        for &(kc, t) in &o.terms {
            eta += x[s + kc] + x[s + k + kc] * t;
        }
        if let Some(d) = self.data.delta_index() {
            eta += x[d] * o.treated;
        }
        eta
    }

    /// Predicted probability of a correct first attempt for each observation.
    pub fn predictions(&self, x: &[f64]) -> Vec<f64> {
        self.data.obs.iter().map(|o| sigmoid(self.eta(x, o))).collect()
    }

    /// Unpenalized Bernoulli log-likelihood.
    pub fn log_lik(&self, x: &[f64]) -> f64 {
        self.data
            .obs
            .iter()
            .map(|o| {
                let eta = self.eta(x, o);
                o.y * eta - softplus(eta)
            })
            .sum()
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        self.l2_theta * x[..self.data.n_students()].iter().map(|t| t * t).sum::<f64>()
    }

    /// The maximized objective.
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.log_lik(x) - self.penalty(x)
    }

    /// Analytic gradient of [`objective`](Self::objective).
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let s = self.data.n_students();
        let k = self.data.n_kcs();
        let mut g = alloc::vec![0.0; self.dim()];
        let delta = self.data.delta_index();
        for o in &self.data.obs {
            let r = o.y - sigmoid(self.eta(x, o));
            g[o.student] += r;
            for &(kc, t) in &o.terms {
                g[s + kc] += r;
                g[s + k + kc] += r * t;
            }
            if let Some(d) = delta {
                g[d] += r * o.treated;
            }
        }
        for (gi, xi) in g[..s].iter_mut().zip(&x[..s]) {
            *gi -= 2.0 * self.l2_theta * xi;
        }
        g
    }

    pub(crate) fn curvature(&self, x: &[f64]) -> Curvature {
        let s = self.data.n_students();
        let k = self.data.n_kcs();
        let rd = self.data.rest_dim();
        let mut d = alloc::vec![2.0 * self.l2_theta; s];
        let mut b = alloc::vec![0.0; s * rd];
        let mut c = SquareMatrix::zeros(rd);
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for o in &self.data.obs {
            let p = sigmoid(self.eta(x, o));
            let w = p * (1.0 - p);
            if w == 0.0 {
                continue;
            }
            entries.clear();
            for &(kc, t) in &o.terms {
                entries.push((kc, 1.0));
                if t != 0.0 {
                    entries.push((k + kc, t));
                }
            }
            if self.data.with_condition && o.treated != 0.0 {
                entries.push((2 * k, o.treated));
            }
            d[o.student] += w;
            let row = &mut b[o.student * rd..(o.student + 1) * rd];
            for &(i, vi) in &entries {
                row[i] += w * vi;
                for &(j, vj) in &entries {
                    c.add(i, j, w * vi * vj);
                }
            }
        }
        Curvature { d, b, c }
    }

    /// Solves `(-H + damping I) dir = rhs` over the free coordinates. Fixed
    /// coordinates get a zero component. `free_rest[r]` says whether rest
    /// coordinate `r` is free; students are always free.
    pub(crate) fn newton_direction(
        &self,
        curv: &Curvature,
        rhs: &[f64],
        free_rest: &[bool],
        damping: f64,
    ) -> Option<Vec<f64>> {
        let s = self.data.n_students();
        let rd = self.data.rest_dim();
        let free: Vec<usize> = (0..rd).filter(|&r| free_rest[r]).collect();
        let m = free.len();
        let d: Vec<f64> = curv.d.iter().map(|v| v + damping).collect();

        let mut schur = SquareMatrix::zeros(m);
        for (a, &ra) in free.iter().enumerate() {
            for (bb, &rb) in free.iter().enumerate() {
                schur.data[a * m + bb] = curv.c.get(ra, rb);
            }
            schur.data[a * m + a] += damping;
        }
        let mut reduced: Vec<f64> = free.iter().map(|&r| rhs[s + r]).collect();
        let mut bf = alloc::vec![0.0; m];
        for st in 0..s {
            let row = &curv.b[st * rd..(st + 1) * rd];
            let mut any = false;
            for (a, &ra) in free.iter().enumerate() {
                bf[a] = row[ra];
                any |= bf[a] != 0.0;
            }
            if !any {
                continue;
            }
            let inv = 1.0 / d[st];
            for a in 0..m {
                if bf[a] == 0.0 {
                    continue;
                }
                reduced[a] -= bf[a] * inv * rhs[st];
                let scaled = bf[a] * inv;
                for (cell, &v) in schur.data[a * m..(a + 1) * m].iter_mut().zip(bf.iter()) {
                    *cell -= scaled * v;
                }
            }
        }
        let sol = if m == 0 { Vec::new() } else { schur.cholesky_solve(&reduced)? };

        let mut dir = alloc::vec![0.0; self.dim()];
        for (a, &ra) in free.iter().enumerate() {
            dir[s + ra] = sol[a];
        }
        for st in 0..s {
            let row = &curv.b[st * rd..(st + 1) * rd];
            let mut v = rhs[st];
            for (a, &ra) in free.iter().enumerate() {
                v -= row[ra] * sol[a];
            }
            dir[st] = v / d[st];
        }
        if dir.iter().all(|v| v.is_finite()) {
            Some(dir)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SquareMatrix;

    /// Tiny problem with a brute-force dense Hessian for the Schur solve.
    fn small_problem() -> AfmProblem {
        let obs = alloc::vec![
            Obs { student: 0, terms: alloc::vec![(0, 0.0)], y: 0.0, treated: 0.0 },
            Obs { student: 0, terms: alloc::vec![(0, 1.0)], y: 1.0, treated: 1.0 },
            Obs { student: 1, terms: alloc::vec![(0, 0.0), (1, 0.0)], y: 0.0, treated: 1.0 },
            Obs { student: 1, terms: alloc::vec![(1, 1.0)], y: 1.0, treated: 0.0 },
            Obs { student: 2, terms: alloc::vec![(1, 0.0)], y: 1.0, treated: 0.0 },
            Obs { student: 2, terms: alloc::vec![(0, 1.0), (1, 2.0)], y: 0.0, treated: 1.0 },
        ];
        let data = AfmData {
            students: alloc::vec!["a".into(), "b".into(), "c".into()],
            kcs: alloc::vec!["k0".into(), "k1".into()],
            obs,
            kc_counts: alloc::vec![3, 4],
            with_condition: true,
        };
        AfmProblem::new(data, 0.5)
    }

    fn dense_neg_hessian(p: &AfmProblem, x: &[f64]) -> SquareMatrix {
        let n = p.dim();
        let h = 1e-5;
        let mut m = SquareMatrix::zeros(n);
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let gp = p.gradient(&xp);
            let gm = p.gradient(&xm);
            for i in 0..n {
                m.data[i * n + j] = -(gp[i] - gm[i]) / (2.0 * h);
            }
        }
        m
    }

    #[test]
    fn schur_solve_matches_dense_solve() {
        let p = small_problem();
        let x = [0.1, -0.2, 0.3, 0.5, -0.4, 0.2, 0.1, -0.3];
        let rhs = [1.0, -0.5, 0.25, 0.3, -0.7, 0.9, 0.1, 0.4];
        let curv = p.curvature(&x);
        let free = [true; 5];
        let dir = p.newton_direction(&curv, &rhs, &free, 0.0).unwrap();
        let dense = dense_neg_hessian(&p, &x);
        let want = dense.cholesky_solve(&rhs).unwrap();
        for (a, b) in dir.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fixed_coordinates_get_zero_step() {
        let p = small_problem();
        let x = [0.0; 8];
        let g = p.gradient(&x);
        let curv = p.curvature(&x);
        let free = [true, true, false, true, true];
        let dir = p.newton_direction(&curv, &g, &free, 0.0).unwrap();
        assert_eq!(dir[3 + 2], 0.0);
        let ascent: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!(ascent > 0.0);
    }
}
