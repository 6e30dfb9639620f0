//! Affine matrix expressions over matrix decision variables and block LMIs.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    /// Symmetric matrix; only the upper triangle is free.
    Symmetric,
    /// Unstructured rectangular matrix.
    Full,
}

/// Handle to a matrix variable registered in an [`LmiProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariableInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: VarKind,
    /// Offset of the first scalar of this variable in the decision vector.
    pub offset: usize,
}

impl VariableInfo {
    pub fn scalar_count(&self) -> usize {
        match self.kind {
            VarKind::Symmetric => self.rows * (self.rows + 1) / 2,
            VarKind::Full => self.rows * self.cols,
        }
    }

    /// Structural basis matrix of scalar `k` and its position.
    fn basis(&self, k: usize) -> Vec<(usize, usize)> {
        match self.kind {
            VarKind::Full => vec![(k / self.cols, k % self.cols)],
            VarKind::Symmetric => {
                let (i, j) = upper_index(self.rows, k);
                if i == j {
                    vec![(i, i)]
                } else {
                    vec![(i, j), (j, i)]
                }
            }
        }
    }

    /// Rebuilds the matrix value from the decision vector.
    pub fn assemble(&self, z: &[f64]) -> Mat {
        let mut m = Mat::zeros(self.rows, self.cols);
        for k in 0..self.scalar_count() {
            for (i, j) in self.basis(k) {
                m[(i, j)] = z[self.offset + k];
            }
        }
        m
    }
}

/// Row-major enumeration of the upper triangle.
fn upper_index(n: usize, mut k: usize) -> (usize, usize) {
    for i in 0..n {
        let len = n - i;
        if k < len {
            return (i, i + k);
        }
        k -= len;
    }
    unreachable!("scalar index outside symmetric variable")
}

#[derive(Debug, Clone)]
struct Term {
    var: Var,
    left: Mat,
    right: Mat,
    transposed: bool,
}

/// `C + Σ Lᵢ Xᵢ Rᵢ` where each `Xᵢ` is a decision variable, possibly transposed.
#[derive(Debug, Clone)]
pub struct Expr {
    rows: usize,
    cols: usize,
    constant: Mat,
    terms: Vec<Term>,
}

impl Expr {
    pub fn constant(m: Mat) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: m,
            terms: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Mat::zeros(rows, cols))
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        Self::constant(Mat::identity(n, n) * scale)
    }

    pub fn var(v: Var) -> Self {
        Self {
            rows: v.rows,
            cols: v.cols,
            constant: Mat::zeros(v.rows, v.cols),
            terms: vec![Term {
                var: v,
                left: Mat::identity(v.rows, v.rows),
                right: Mat::identity(v.cols, v.cols),
                transposed: false,
            }],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `M · self`.
    pub fn lmul(mut self, m: &Mat) -> Self {
        assert_eq!(m.ncols(), self.rows, "left factor has wrong column count");
        self.rows = m.nrows();
        self.constant = m * &self.constant;
        for t in &mut self.terms {
            t.left = m * &t.left;
        }
        self
    }

    /// `self · M`.
    pub fn rmul(mut self, m: &Mat) -> Self {
        assert_eq!(m.nrows(), self.cols, "right factor has wrong row count");
        self.cols = m.ncols();
        self.constant = &self.constant * m;
        for t in &mut self.terms {
            t.right = &t.right * m;
        }
        self
    }

    pub fn scale(mut self, s: f64) -> Self {
        self.constant *= s;
        for t in &mut self.terms {
            t.left *= s;
        }
        self
    }

    pub fn transpose(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.transpose(),
            terms: self
                .terms
                .into_iter()
                .map(|t| Term {
                    var: t.var,
                    left: t.right.transpose(),
                    right: t.left.transpose(),
                    transposed: !t.transposed,
                })
                .collect(),
        }
    }

    pub fn plus(mut self, other: Expr) -> Self {
        assert_eq!(self.shape(), other.shape(), "expression shapes differ");
        self.constant += other.constant;
        self.terms.extend(other.terms);
        self
    }

    pub fn minus(self, other: Expr) -> Self {
        self.plus(other.scale(-1.0))
    }

    /// Value at decision vector `z`.
    pub fn evaluate(&self, vars: &[VariableInfo], z: &[f64]) -> Mat {
        let mut out = self.constant.clone();
        for t in &self.terms {
            let x = vars[t.var.index].assemble(z);
            let x = if t.transposed { x.transpose() } else { x };
            out += &t.left * x * &t.right;
        }
        out
    }

    /// Coefficient matrix of every decision scalar that appears.
    fn lower(&self, vars: &[VariableInfo], into: &mut BTreeMap<usize, Mat>) {
        for t in &self.terms {
            let info = &vars[t.var.index];
            for k in 0..info.scalar_count() {
                let mut coeff = Mat::zeros(self.rows, self.cols);
                for (i, j) in info.basis(k) {
                    let (i, j) = if t.transposed { (j, i) } else { (i, j) };
                    coeff += t.left.column(i) * t.right.row(j);
                }
                if coeff.iter().all(|v| *v == 0.0) {
                    continue;
                }
                *into
                    .entry(info.offset + k)
                    .or_insert_with(|| Mat::zeros(self.rows, self.cols)) += coeff;
            }
        }
    }
}

fn add_block(full: &mut Mat, block: &Mat, r: usize, c: usize) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            full[(r + i, c + j)] += block[(i, j)];
        }
    }
}

impl From<Mat> for Expr {
    fn from(m: Mat) -> Self {
        Expr::constant(m)
    }
}

impl From<Var> for Expr {
    fn from(v: Var) -> Self {
        Expr::var(v)
    }
}

/// Symmetric block matrix required to be positive definite. Only blocks on
/// or above the diagonal are stored; diagonal blocks are symmetrized.
#[derive(Debug, Clone)]
pub struct BlockLmi {
    pub name: String,
    sizes: Vec<usize>,
    blocks: BTreeMap<(usize, usize), Expr>,
}

impl BlockLmi {
    pub fn new(name: impl Into<String>, sizes: &[usize]) -> Self {
        Self {
            name: name.into(),
            sizes: sizes.to_vec(),
            blocks: BTreeMap::new(),
        }
    }

    /// Sets block `(i, j)`; a block below the diagonal is stored transposed.
    pub fn set(mut self, i: usize, j: usize, e: impl Into<Expr>) -> Self {
        let e = e.into();
        let (i, j, e) = if i > j { (j, i, e.transpose()) } else { (i, j, e) };
        assert_eq!(
            e.shape(),
            (self.sizes[i], self.sizes[j]),
            "block ({i}, {j}) of {} has wrong shape",
            self.name
        );
        self.blocks.insert((i, j), e);
        self
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sizes
            .iter()
            .map(|s| {
                let o = acc;
                acc += s;
                o
            })
            .collect()
    }

    pub fn evaluate(&self, vars: &[VariableInfo], z: &[f64]) -> Mat {
        let off = self.offsets();
        let mut m = Mat::zeros(self.dim(), self.dim());
        for (&(i, j), e) in &self.blocks {
            let v = e.evaluate(vars, z);
            let v = if i == j { linalg::sym(&v) } else { v };
            add_block(&mut m, &v, off[i], off[j]);
            if i != j {
                add_block(&mut m, &v.transpose(), off[j], off[i]);
            }
        }
        m
    }

    pub(crate) fn lower(&self, vars: &[VariableInfo]) -> LoweredLmi {
        let off = self.offsets();
        let d = self.dim();
        let mut constant = Mat::zeros(d, d);
        let mut coeffs: BTreeMap<usize, Mat> = BTreeMap::new();
        for (&(i, j), e) in &self.blocks {
            let c = if i == j { linalg::sym(&e.constant) } else { e.constant.clone() };
            add_block(&mut constant, &c, off[i], off[j]);
            if i != j {
                add_block(&mut constant, &c.transpose(), off[j], off[i]);
            }
            let mut local: BTreeMap<usize, Mat> = BTreeMap::new();
            e.lower(vars, &mut local);
            for (k, blk) in local {
                let full = coeffs.entry(k).or_insert_with(|| Mat::zeros(d, d));
                if i == j {
                    add_block(full, &linalg::sym(&blk), off[i], off[j]);
                } else {
                    add_block(full, &blk, off[i], off[j]);
                    add_block(full, &blk.transpose(), off[j], off[i]);
                }
            }
        }
        LoweredLmi {
            constant,
            coeffs: coeffs.into_iter().collect(),
        }
    }
}

/// `F(z) = F₀ + Σ zₖ Fₖ` with dense symmetric coefficients.
#[derive(Debug, Clone)]
pub(crate) struct LoweredLmi {
    pub constant: Mat,
    pub coeffs: Vec<(usize, Mat)>,
}

/// Linear objective `Σ ⟨Wᵢ, Xᵢ⟩` to be minimized.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    weights: Vec<(Var, Mat)>,
}

impl Objective {
    pub fn minimize(mut self, v: Var, weight: Mat) -> Self {
        assert_eq!(weight.shape(), (v.rows, v.cols), "objective weight has wrong shape");
        self.weights.push((v, weight));
        self
    }

    pub(crate) fn vector(&self, vars: &[VariableInfo], len: usize) -> Vec<f64> {
        let mut w = vec![0.0; len];
        for (v, weight) in &self.weights {
            let info = &vars[v.index];
            for k in 0..info.scalar_count() {
                w[info.offset + k] += info.basis(k).iter().map(|&(i, j)| weight[(i, j)]).sum::<f64>();
            }
        }
        w
    }
}

/// Collection of matrix variables, block LMIs and an optional objective.
#[derive(Debug, Clone, Default)]
pub struct LmiProblem {
    vars: Vec<VariableInfo>,
    constraints: Vec<BlockLmi>,
    objective: Option<Objective>,
}

impl LmiProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_var(&mut self, name: &str, rows: usize, cols: usize, kind: VarKind) -> Result<Var> {
        if self.vars.iter().any(|v| v.name == name) {
            return Err(Error::invalid(format!("duplicate variable name {name}")));
        }
        let offset = self.scalar_count();
        self.vars.push(VariableInfo {
            name: name.to_string(),
            rows,
            cols,
            kind,
            offset,
        });
        Ok(Var {
            index: self.vars.len() - 1,
            rows,
            cols,
        })
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> Result<Var> {
        self.add_var(name, n, n, VarKind::Symmetric)
    }

    pub fn full(&mut self, name: &str, rows: usize, cols: usize) -> Result<Var> {
        self.add_var(name, rows, cols, VarKind::Full)
    }

    pub fn constrain(&mut self, lmi: BlockLmi) {
        self.constraints.push(lmi);
    }

    pub fn set_objective(&mut self, objective: Objective) {
        self.objective = Some(objective);
    }

    pub fn objective(&self) -> Option<&Objective> {
        self.objective.as_ref()
    }

    pub fn variables(&self) -> &[VariableInfo] {
        &self.vars
    }

    pub fn constraints(&self) -> &[BlockLmi] {
        &self.constraints
    }

    pub fn scalar_count(&self) -> usize {
        self.vars.iter().map(|v| v.scalar_count()).sum()
    }

    /// Named matrix values for a decision vector.
    pub fn assignments(&self, z: &[f64]) -> BTreeMap<String, Mat> {
        self.vars.iter().map(|v| (v.name.clone(), v.assemble(z))).collect()
    }

    /// Block structure and variable sizes, for reproducing solver failures.
    pub fn debug_dump(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct BlockDump {
            row: usize,
            col: usize,
            variables: Vec<String>,
            constant_max_abs: f64,
        }
        #[derive(Serialize)]
        struct LmiDump {
            name: String,
            block_sizes: Vec<usize>,
            blocks: Vec<BlockDump>,
        }
        let constraints: Vec<LmiDump> = self
            .constraints
            .iter()
            .map(|c| LmiDump {
                name: c.name.clone(),
                block_sizes: c.sizes.clone(),
                blocks: c
                    .blocks
                    .iter()
                    .map(|(&(row, col), e)| BlockDump {
                        row,
                        col,
                        variables: e
                            .terms
                            .iter()
                            .map(|t| {
                                let name = &self.vars[t.var.index].name;
                                if t.transposed {
                                    format!("{name}ᵀ")
                                } else {
                                    name.clone()
                                }
                            })
                            .collect(),
                        constant_max_abs: linalg::max_abs(&e.constant),
                    })
                    .collect(),
            })
            .collect();
        serde_json::json!({
            "variables": self.vars,
            "scalar_count": self.scalar_count(),
            "constraints": constraints,
            "has_objective": self.objective.is_some(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_triangle_enumeration() {
        let got: Vec<_> = (0..6).map(|k| upper_index(3, k)).collect();
        assert_eq!(got, vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn lowering_matches_evaluation() {
        let mut p = LmiProblem::new();
        let x = p.symmetric("P", 2).unwrap();
        let l = p.full("L", 2, 1).unwrap();
        let a = Mat::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.2]);
        let c = Mat::from_row_slice(1, 2, &[1.0, 2.0]);
        let off = Expr::var(x).rmul(&a).plus(Expr::var(l).rmul(&c));
        let lmi = BlockLmi::new("test", &[2, 2])
            .set(0, 0, x)
            .set(1, 0, off)
            .set(1, 1, Expr::var(x).scale(2.0).plus(Expr::identity(2, 1.0)));
        p.constrain(lmi);
        let z = [1.5, -0.2, 0.7, 0.3, -0.9];
        let lowered = p.constraints()[0].lower(p.variables());
        let mut by_coeff = lowered.constant.clone();
        for (k, m) in &lowered.coeffs {
            by_coeff += m * z[*k];
        }
        let direct = p.constraints()[0].evaluate(p.variables(), &z);
        assert!((by_coeff - &direct).amax() < 1e-14);
        assert!((&direct - direct.transpose()).amax() < 1e-14);
        let pm = p.assignments(&z)["P"].clone();
        assert_eq!(pm, Mat::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.7]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = LmiProblem::new();
        p.symmetric("P", 1).unwrap();
        assert!(p.full("P", 1, 1).is_err());
    }

    #[test]
    fn dump_lists_blocks() {
        let mut p = LmiProblem::new();
        let x = p.symmetric("P", 1).unwrap();
        p.constrain(BlockLmi::new("pos", &[1]).set(0, 0, x));
        let d = p.debug_dump();
        assert_eq!(d["constraints"][0]["blocks"][0]["variables"][0], "P");
        assert_eq!(d["scalar_count"], 1);
    }
}
