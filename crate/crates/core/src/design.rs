//! Longitudinal data ingestion and the linear-mixed-model design.
//!
//! Row `j` of subject `i` contributes `W_ij = (X_1 B(t)ᵀ, …, X_p B(t)ᵀ)` to the
//! fixed design and `U_ij = (Z_1 B_ν(t)ᵀ, …, Z_q B_ν(t)ᵀ)` to the random design.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FmmError, Result};
use crate::splines::SplineBasis;

/// Largest number of subjects a single target may put random-effect weight on.
pub const MAX_TARGET_SUBJECTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// `m_i × p` fixed-effect covariates.
    pub x: DMatrix<f64>,
    /// `m_i × q` random-effect covariates.
    pub z: DMatrix<f64>,
}

impl SubjectRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Column means of `X`.
    pub fn x_mean(&self) -> DVector<f64> {
        self.x.row_mean().transpose()
    }

    /// Column means of `Z`.
    pub fn z_mean(&self) -> DVector<f64> {
        self.z.row_mean().transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    p: usize,
    q: usize,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| FmmError::InvalidConfig("dataset has no subjects".into()))?;
        let (p, q) = (first.x.ncols(), first.z.ncols());
        if p == 0 || q == 0 {
            return Err(FmmError::InvalidConfig(
                "need at least one fixed and one random covariate".into(),
            ));
        }
        for s in &subjects {
            let m = s.times.len();
            if m == 0 {
                return Err(FmmError::InvalidConfig(format!("subject {} has no rows", s.id)));
            }
            if s.y.len() != m || s.x.nrows() != m || s.z.nrows() != m {
                return Err(FmmError::Shape(format!("subject {} has ragged columns", s.id)));
            }
            if s.x.ncols() != p || s.z.ncols() != q {
                return Err(FmmError::Shape(format!(
                    "subject {} has covariate widths ({}, {}), expected ({p}, {q})",
                    s.id,
                    s.x.ncols(),
                    s.z.ncols()
                )));
            }
            if let Some(t) = s.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(FmmError::Domain(format!(
                    "subject {} has time {t} outside [0, 1]",
                    s.id
                )));
            }
            let finite = s.y.iter().chain(s.x.iter()).chain(s.z.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(FmmError::Domain(format!("subject {} has a non-finite value", s.id)));
            }
        }
        Ok(Self { subjects, p, q })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn counts(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.len()).collect()
    }

    pub fn total_rows(&self) -> usize {
        self.subjects.iter().map(|s| s.len()).sum()
    }

    /// Stacked responses in subject order.
    pub fn response(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.total_rows(),
            self.subjects.iter().flat_map(|s| s.y.iter().copied()),
        )
    }

    /// Copy with the responses replaced (same row layout).
    pub fn with_response(&self, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.total_rows() {
            return Err(FmmError::Shape(format!(
                "response has {} rows, dataset has {}",
                y.len(),
                self.total_rows()
            )));
        }
        let mut out = self.clone();
        let mut k = 0;
        for s in &mut out.subjects {
            for v in &mut s.y {
                *v = y[k];
                k += 1;
            }
        }
        Ok(out)
    }
}

/// Column names for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub subject: String,
    pub time: String,
    pub response: String,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
}

impl ColumnSchema {
    pub fn standard(p: usize, q: usize) -> Self {
        Self {
            subject: "subject".into(),
            time: "t".into(),
            response: "y".into(),
            fixed: (1..=p).map(|k| format!("x{k}")).collect(),
            random: (1..=q).map(|k| format!("z{k}")).collect(),
        }
    }

    /// Standard names with `p`, `q` inferred from the `x1..`, `z1..` columns present.
    pub fn infer(header: &[&str]) -> Self {
        let count = |prefix: &str| {
            (1..)
                .take_while(|k| header.contains(&format!("{prefix}{k}").as_str()))
                .count()
        };
        Self::standard(count("x"), count("z"))
    }
}

/// Reads a dataset from a CSV file; `None` infers the standard schema from the header.
pub fn load_dataset(path: impl AsRef<Path>, schema: Option<&ColumnSchema>) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: Option<&ColumnSchema>) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => ColumnSchema::infer(&header_refs),
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FmmError::Schema(format!("missing column `{name}`")))
    };
    let subject_col = col(&schema.subject)?;
    let time_col = col(&schema.time)?;
    let y_col = col(&schema.response)?;
    if schema.fixed.is_empty() {
        return Err(FmmError::Schema("no fixed-effect covariate columns (x1..)".into()));
    }
    if schema.random.is_empty() {
        return Err(FmmError::Schema("no random-effect covariate columns (z1..)".into()));
    }
    let x_cols = schema.fixed.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = schema.random.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    struct Row {
        t: f64,
        y: f64,
        x: Vec<f64>,
        z: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        // header is line 1, so data row k sits on line k + 1
        let row = idx + 2;
        let rec = rec?;
        let field = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| FmmError::Parse {
                row,
                msg: format!("column `{}`: cannot parse `{raw}` as a number", header[c]),
            })
        };
        let id = rec.get(subject_col).unwrap_or("").to_string();
        let t = field(time_col)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(FmmError::Domain(format!("row {row}: time {t} outside [0, 1]")));
        }
        let y = field(y_col)?;
        let x = x_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?;
        let z = z_cols.iter().map(|&c| field(c)).collect::<Result<Vec<_>>>()?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { t, y, x, z });
    }

    let (p, q) = (x_cols.len(), z_cols.len());
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        let m = rows.len();
        subjects.push(SubjectRecord {
            times: rows.iter().map(|r| r.t).collect(),
            y: rows.iter().map(|r| r.y).collect(),
            x: DMatrix::from_fn(m, p, |j, k| rows[j].x[k]),
            z: DMatrix::from_fn(m, q, |j, k| rows[j].z[k]),
            id,
        });
    }
    LongitudinalDataset::new(subjects)
}

/// Writes the dataset with the standard schema. Values use shortest
/// round-trip formatting, so reading the file back reproduces every bit.
pub fn write_dataset<W: Write>(data: &LongitudinalDataset, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let schema = ColumnSchema::standard(data.p(), data.q());
    let mut header = vec![schema.subject.clone(), schema.time.clone(), schema.response.clone()];
    header.extend(schema.fixed.iter().cloned());
    header.extend(schema.random.iter().cloned());
    wtr.write_record(&header)?;
    for s in data.subjects() {
        for j in 0..s.len() {
            let mut rec = vec![s.id.clone(), s.times[j].to_string(), s.y[j].to_string()];
            rec.extend(s.x.row(j).iter().map(|v| v.to_string()));
            rec.extend(s.z.row(j).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(data: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(data, file)
}

/// Per-subject design blocks plus the stacked fixed design.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub w_blocks: Vec<DMatrix<f64>>,
    pub u_blocks: Vec<DMatrix<f64>>,
    pub y_blocks: Vec<DVector<f64>>,
    /// Stacked `W` with `Σ m_i` rows and `pL` columns.
    pub w: DMatrix<f64>,
    pub y: DVector<f64>,
    /// First stacked row of each subject.
    pub offsets: Vec<usize>,
    pub p: usize,
    pub q: usize,
    pub fixed_size: usize,
    pub random_size: usize,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.w_blocks.len()
    }

    pub fn total_rows(&self) -> usize {
        self.w.nrows()
    }

    /// `pL`
    pub fn fixed_dim(&self) -> usize {
        self.p * self.fixed_size
    }

    /// `qL`
    pub fn random_dim(&self) -> usize {
        self.q * self.random_size
    }

    /// Dense `U = Diag(U_1, …, U_n)`.
    pub fn u_dense(&self) -> DMatrix<f64> {
        crate::linalg::block_diag(&self.u_blocks)
    }

    /// Same design, different response.
    pub fn with_response(&self, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.total_rows() {
            return Err(FmmError::Shape(format!(
                "response has {} rows, design has {}",
                y.len(),
                self.total_rows()
            )));
        }
        let mut out = self.clone();
        for (i, yb) in out.y_blocks.iter_mut().enumerate() {
            yb.copy_from(&y.rows(self.offsets[i], yb.len()));
        }
        out.y = y.clone();
        Ok(out)
    }
}

/// Row of Kronecker-style products `(c_1 b, …, c_k b)`.
fn expand_row(cov: impl Iterator<Item = f64>, basis_values: &DVector<f64>, out: &mut [f64]) {
    let size = basis_values.len();
    for (k, c) in cov.enumerate() {
        for (l, b) in basis_values.iter().enumerate() {
            out[k * size + l] = c * b;
        }
    }
}

pub fn build_design(
    data: &LongitudinalDataset,
    fixed_basis: &SplineBasis,
    random_basis: &SplineBasis,
) -> Result<DesignMatrices> {
    let (p, q) = (data.p(), data.q());
    let (lf, lr) = (fixed_basis.size(), random_basis.size());
    let mut w_blocks = Vec::with_capacity(data.n());
    let mut u_blocks = Vec::with_capacity(data.n());
    let mut y_blocks = Vec::with_capacity(data.n());
    let mut offsets = Vec::with_capacity(data.n());
    let mut offset = 0;
    let mut row_buf_w = vec![0.0; p * lf];
    let mut row_buf_u = vec![0.0; q * lr];
    for s in data.subjects() {
        let m = s.len();
        let mut wi = DMatrix::zeros(m, p * lf);
        let mut ui = DMatrix::zeros(m, q * lr);
        for j in 0..m {
            let bf = fixed_basis.eval(s.times[j])?;
            let br = random_basis.eval(s.times[j])?;
            expand_row(s.x.row(j).iter().copied(), &bf, &mut row_buf_w);
            expand_row(s.z.row(j).iter().copied(), &br, &mut row_buf_u);
            for (c, v) in row_buf_w.iter().enumerate() {
                wi[(j, c)] = *v;
            }
            for (c, v) in row_buf_u.iter().enumerate() {
                ui[(j, c)] = *v;
            }
        }
        w_blocks.push(wi);
        u_blocks.push(ui);
        y_blocks.push(DVector::from_column_slice(&s.y));
        offsets.push(offset);
        offset += m;
    }
    let mut w = DMatrix::zeros(offset, p * lf);
    for (i, wi) in w_blocks.iter().enumerate() {
        w.view_mut((offsets[i], 0), wi.shape()).copy_from(wi);
    }
    Ok(DesignMatrices {
        w_blocks,
        u_blocks,
        y: data.response(),
        y_blocks,
        w,
        offsets,
        p,
        q,
        fixed_size: lf,
        random_size: lr,
    })
}

/// Mixed effect `A = l0ᵀβ(t0) + Σ_i d_i0ᵀ ν_i(t0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedEffectTarget {
    pub l0: Vec<f64>,
    /// Subject index to its `q`-vector of random-effect weights.
    pub d0: BTreeMap<usize, Vec<f64>>,
    pub t0: f64,
}

impl MixedEffectTarget {
    /// Subject-mean target `X̄_i β(t0) + Z̄_i ν_i(t0)`.
    pub fn subject_mean(data: &LongitudinalDataset, subject: usize, t0: f64) -> Self {
        let s = &data.subjects()[subject];
        let mut d0 = BTreeMap::new();
        d0.insert(subject, s.z_mean().iter().copied().collect());
        Self {
            l0: s.x_mean().iter().copied().collect(),
            d0,
            t0,
        }
    }

    pub fn fixed_only(l0: Vec<f64>, t0: f64) -> Self {
        Self {
            l0,
            d0: BTreeMap::new(),
            t0,
        }
    }
}

/// `l ∈ ℝ^{pL}` and the sparse blocks `d_i ∈ ℝ^{qL}` of a target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVectors {
    pub l: DVector<f64>,
    pub d: BTreeMap<usize, DVector<f64>>,
}

impl TargetVectors {
    /// Dense `d` of length `n·qL`.
    pub fn d_dense(&self, n: usize, random_dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n * random_dim);
        for (&i, di) in &self.d {
            out.rows_mut(i * random_dim, random_dim).copy_from(di);
        }
        out
    }
}

pub fn build_target(
    target: &MixedEffectTarget,
    fixed_basis: &SplineBasis,
    random_basis: &SplineBasis,
    n: usize,
) -> Result<TargetVectors> {
    let nonzero: Vec<(&usize, &Vec<f64>)> = target
        .d0
        .iter()
        .filter(|(_, v)| v.iter().any(|x| *x != 0.0))
        .collect();
    if nonzero.len() > MAX_TARGET_SUBJECTS {
        return Err(FmmError::SparsityViolation {
            nonzero: nonzero.len(),
            limit: MAX_TARGET_SUBJECTS,
        });
    }
    let bf = fixed_basis.eval(target.t0)?;
    let br = random_basis.eval(target.t0)?;
    let mut l = vec![0.0; target.l0.len() * bf.len()];
    expand_row(target.l0.iter().copied(), &bf, &mut l);
    let mut d = BTreeMap::new();
    let q = nonzero.first().map(|(_, v)| v.len());
    for (&i, d0) in nonzero {
        if i >= n {
            return Err(FmmError::Shape(format!("target subject {i} out of range (n = {n})")));
        }
        if Some(d0.len()) != q {
            return Err(FmmError::Shape("target random weights have ragged widths".into()));
        }
        let mut di = vec![0.0; d0.len() * br.len()];
        expand_row(d0.iter().copied(), &br, &mut di);
        d.insert(i, DVector::from_vec(di));
    }
    Ok(TargetVectors {
        l: DVector::from_vec(l),
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::make_basis;

    const SMALL: &str = "subject,t,y,x1,z1\na,0.5,1.0,1.0,2.0\nb,0.2,2.0,1.0,1.0\na,0.1,3.0,2.0,1.0\nb,0.9,4.0,1.0,1.0\n";

    #[test]
    fn groups_and_sorts() {
        let d = read_dataset(SMALL.as_bytes(), None).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.counts(), vec![2, 2]);
        assert_eq!(d.subjects()[0].id, "a");
        assert_eq!(d.subjects()[0].times, vec![0.1, 0.5]);
        assert_eq!(d.subjects()[0].y, vec![3.0, 1.0]);
        assert_eq!((d.p(), d.q()), (1, 1));
    }

    #[test]
    fn time_out_of_range_names_row() {
        let bad = "subject,t,y,x1,z1\na,0.5,1,1,1\na,1.5,1,1,1\n";
        match read_dataset(bad.as_bytes(), None) {
            Err(FmmError::Domain(msg)) => assert!(msg.contains("row 3"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_names_row() {
        let bad = "subject,t,y,x1,z1\na,0.5,oops,1,1\n";
        assert!(matches!(
            read_dataset(bad.as_bytes(), None),
            Err(FmmError::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let bad = "subject,t,x1,z1\na,0.5,1,1\n";
        assert!(matches!(read_dataset(bad.as_bytes(), None), Err(FmmError::Schema(_))));
    }

    #[test]
    fn constant_basis_gives_ones_and_times() {
        let csv = "subject,t,y,x1,z1\na,0.25,1,1,1\na,0.75,1,1,1\nb,0.5,1,1,1\n";
        let d = read_dataset(csv.as_bytes(), None).unwrap();
        let b = make_basis(1, 0).unwrap();
        let des = build_design(&d, &b, &b).unwrap();
        assert_eq!(des.w.shape(), (3, 1));
        assert!(des.w.iter().all(|&v| v == 1.0));

        let csv_t = "subject,t,y,x1,z1\na,0.25,1,0.25,1\na,0.75,1,0.75,1\nb,0.5,1,0.5,1\n";
        let d = read_dataset(csv_t.as_bytes(), None).unwrap();
        let des = build_design(&d, &b, &b).unwrap();
        assert_eq!(des.w.column(0).as_slice(), &[0.25, 0.75, 0.5]);
    }

    #[test]
    fn zero_target() {
        let b = make_basis(4, 3).unwrap();
        let t = MixedEffectTarget::fixed_only(vec![0.0], 0.3);
        let v = build_target(&t, &b, &b, 5).unwrap();
        assert!(v.l.iter().all(|&x| x == 0.0));
        assert!(v.d.is_empty());
    }

    #[test]
    fn single_subject_target() {
        let b = make_basis(1, 0).unwrap();
        let mut d0 = BTreeMap::new();
        d0.insert(3, vec![1.0]);
        let t = MixedEffectTarget { l0: vec![1.0], d0, t0: 0.4 };
        let v = build_target(&t, &b, &b, 5).unwrap();
        assert_eq!(v.l.as_slice(), &[1.0]);
        assert_eq!(v.d.len(), 1);
        let dense = v.d_dense(5, 1);
        assert_eq!(dense.as_slice(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn dense_target_rejected() {
        let b = make_basis(2, 1).unwrap();
        let d0 = (0..20).map(|i| (i, vec![1.0])).collect();
        let t = MixedEffectTarget { l0: vec![1.0], d0, t0: 0.4 };
        assert!(matches!(
            build_target(&t, &b, &b, 20),
            Err(FmmError::SparsityViolation { nonzero: 20, .. })
        ));
    }
}
