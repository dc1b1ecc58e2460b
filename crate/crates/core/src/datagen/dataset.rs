use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::GenerationRecord;
use crate::error::{FusionError, Result};
use crate::moments::AssignmentProbs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Rct,
    Obs,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Rct => "rct",
            Source::Obs => "obs",
        })
    }
}

impl std::str::FromStr for Source {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rct" => Ok(Source::Rct),
            "obs" => Ok(Source::Obs),
            other => Err(FusionError::Parse(format!("unknown source {other:?}"))),
        }
    }
}

/// Pooled randomized and observational samples.
///
/// Row `i` is `(x[i], t[i], y[i])` drawn from `source[i]`. Optional columns
/// are filled by the synthetic generators.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub t: Vec<usize>,
    pub y: Vec<f64>,
    pub source: Vec<Source>,
    pub n_arms: usize,
    /// Known assignment law of the randomized rows.
    pub probs: AssignmentProbs<f64>,
    /// Stratum id per row when `probs` is stratified.
    pub strata: Option<Vec<usize>>,
    pub tau_true: Option<Vec<f64>>,
    /// Untreated mean outcome given every generative input, including `z` and `u`.
    pub mu0: Option<Vec<f64>>,
    pub z_latent: Option<Array2<f64>>,
    pub u: Option<Vec<f64>>,
    /// Raw categorical levels behind the one-hot block.
    pub x_cat: Option<Array2<usize>>,
    /// Rows whose covariates fall where the observational policy never treats.
    pub structural: Option<Vec<bool>>,
    pub record: Option<GenerationRecord>,
}

impl Dataset {
    /// Minimal dataset without generator metadata.
    pub fn new(
        x: Array2<f64>,
        t: Vec<usize>,
        y: Vec<f64>,
        source: Vec<Source>,
        probs: AssignmentProbs<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        for len in [t.len(), y.len(), source.len()] {
            if len != n {
                return Err(FusionError::LengthMismatch { left: n, right: len });
            }
        }
        let n_arms = probs.n_arms();
        if let Some(&bad) = t.iter().find(|&&a| a >= n_arms) {
            return Err(FusionError::InvalidTreatment { t: bad, n_arms });
        }
        Ok(Self {
            x,
            t,
            y,
            source,
            n_arms,
            probs,
            strata: None,
            tau_true: None,
            mu0: None,
            z_latent: None,
            u: None,
            x_cat: None,
            structural: None,
            record: None,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn rows_of(&self, source: Source) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.source[i] == source).collect()
    }

    pub fn count(&self, source: Source) -> usize {
        self.source.iter().filter(|&&s| s == source).count()
    }

    pub fn require(&self, source: Source) -> Result<Vec<usize>> {
        let rows = self.rows_of(source);
        if rows.is_empty() {
            return Err(FusionError::MissingSource(source));
        }
        Ok(rows)
    }

    pub fn x_rows(&self, rows: &[usize]) -> Array2<f64> {
        self.x.select(Axis(0), rows)
    }

    pub fn t_rows(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&i| self.t[i]).collect()
    }

    pub fn y_rows(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&i| self.y[i]).collect()
    }

    pub fn strata_rows(&self, rows: &[usize]) -> Option<Vec<usize>> {
        self.strata.as_ref().map(|s| rows.iter().map(|&i| s[i]).collect())
    }

    /// Copy of the listed rows, in order, with every optional column.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x_rows(rows),
            t: self.t_rows(rows),
            y: self.y_rows(rows),
            source: rows.iter().map(|&i| self.source[i]).collect(),
            n_arms: self.n_arms,
            probs: self.probs.clone(),
            strata: self.strata_rows(rows),
            tau_true: self.tau_true.as_ref().map(pick),
            mu0: self.mu0.as_ref().map(pick),
            z_latent: self.z_latent.as_ref().map(|z| z.select(Axis(0), rows)),
            u: self.u.as_ref().map(pick),
            x_cat: self.x_cat.as_ref().map(|c| c.select(Axis(0), rows)),
            structural: self.structural.as_ref().map(|s| rows.iter().map(|&i| s[i]).collect()),
            record: self.record.clone(),
        }
    }

    /// Seeded per-source split; `test_frac` of each source goes to the second part.
    pub fn split_holdout(&self, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_frac) {
            return Err(FusionError::InvalidConfig(format!("test fraction {test_frac}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for source in [Source::Rct, Source::Obs] {
            let mut rows = self.rows_of(source);
            rows.shuffle(&mut rng);
            let n_test = (rows.len() as f64 * test_frac).round() as usize;
            let (te, tr) = rows.split_at(n_test);
            test.extend_from_slice(te);
            train.extend_from_slice(tr);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select(&train), self.select(&test)))
    }

    /// Treatment frequencies among rows of `source`.
    pub fn arm_frequencies(&self, source: Source) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_arms];
        let mut n = 0usize;
        for (&a, &s) in self.t.iter().zip(&self.source) {
            if s == source {
                counts[a] += 1;
                n += 1;
            }
        }
        counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    }

    fn marginal_row(&self) -> Vec<f64> {
        match &self.probs {
            AssignmentProbs::Marginal(p) => p.clone(),
            AssignmentProbs::Stratified(_) => vec![f64::NAN; self.n_arms],
        }
    }

    /// CSV with header `x_0..x_{d-1}, t, y, source, p_0..p_K, tau_true, z_0, z_1, u`.
    ///
    /// Floats are written in shortest round-trip form; missing optional
    /// columns are empty cells. Observational rows carry empty `p_*` cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
        header.extend(["t", "y", "source"].map(String::from));
        header.extend((0..self.n_arms).map(|k| format!("p_{k}")));
        header.extend(["tau_true", "z_0", "z_1", "u"].map(String::from));
        w.write_record(&header)?;
        let p_row = self.marginal_row();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            rec.clear();
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            rec.push(self.t[i].to_string());
            rec.push(self.y[i].to_string());
            rec.push(self.source[i].to_string());
            let probs = match (&self.probs, self.source[i]) {
                (_, Source::Obs) => None,
                (AssignmentProbs::Stratified(table), _) => self.strata.as_ref().map(|s| table[s[i]].clone()),
                (AssignmentProbs::Marginal(_), _) => Some(p_row.clone()),
            };
            match probs {
                Some(p) => rec.extend(p.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), self.n_arms)),
            }
            rec.push(opt(self.tau_true.as_ref().map(|v| v[i])));
            rec.push(opt(self.z_latent.as_ref().map(|z| z[[i, 0]])));
            rec.push(opt(self.z_latent.as_ref().map(|z| z[[i, 1]])));
            rec.push(opt(self.u.as_ref().map(|v| v[i])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads the format written by [`Dataset::write_csv`]. Randomized rows
    /// with differing `p_*` rows become strata.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let xs: Vec<usize> = (0..).map_while(|j| col(&format!("x_{j}"))).collect();
        let ps: Vec<usize> = (0..).map_while(|k| col(&format!("p_{k}"))).collect();
        let need = |name: &str| col(name).ok_or_else(|| FusionError::Parse(format!("missing column {name}")));
        let (ct, cy, cs) = (need("t")?, need("y")?, need("source")?);
        let (ctau, cz0, cz1, cu) = (col("tau_true"), col("z_0"), col("z_1"), col("u"));
        if xs.is_empty() || ps.len() < 2 {
            return Err(FusionError::Parse(
                "need x_* columns and at least two p_* columns".into(),
            ));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| FusionError::Parse(format!("{s:?}: {e}")));
        let opt = |rec: &csv::StringRecord, c: Option<usize>| -> Result<Option<f64>> {
            match c.map(|c| &rec[c]) {
                None | Some("") => Ok(None),
                Some(s) => num(s).map(Some),
            }
        };

        let mut xv = Vec::new();
        let (mut t, mut y, mut source) = (Vec::new(), Vec::new(), Vec::new());
        let (mut tau, mut z, mut u) = (Vec::new(), Vec::new(), Vec::new());
        let mut table: Vec<Vec<f64>> = Vec::new();
        let mut strata = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for &c in &xs {
                xv.push(num(&rec[c])?);
            }
            t.push(
                rec[ct]
                    .parse::<usize>()
                    .map_err(|e| FusionError::Parse(e.to_string()))?,
            );
            y.push(num(&rec[cy])?);
            let s: Source = rec[cs].parse()?;
            source.push(s);
            if s == Source::Rct {
                let p = ps.iter().map(|&c| num(&rec[c])).collect::<Result<Vec<_>>>()?;
                let id = match table.iter().position(|q| *q == p) {
                    Some(id) => id,
                    None => {
                        table.push(p);
                        table.len() - 1
                    }
                };
                strata.push(id);
            } else {
                strata.push(0);
            }
            tau.push(opt(&rec, ctau)?);
            z.push((opt(&rec, cz0)?, opt(&rec, cz1)?));
            u.push(opt(&rec, cu)?);
        }
        let n = t.len();
        let x = Array2::from_shape_vec((n, xs.len()), xv).map_err(|e| FusionError::Parse(e.to_string()))?;
        let probs = match table.len() {
            0 => return Err(FusionError::MissingSource(Source::Rct)),
            1 => AssignmentProbs::marginal(table.pop().expect("one row"))?,
            _ => AssignmentProbs::stratified(table)?,
        };
        let stratified = matches!(probs, AssignmentProbs::Stratified(_));
        let mut ds = Dataset::new(x, t, y, source, probs)?;
        if stratified {
            ds.strata = Some(strata);
        }
        ds.tau_true = tau.iter().copied().collect::<Option<Vec<_>>>();
        ds.u = u.iter().copied().collect::<Option<Vec<_>>>();
        if let Some(flat) = z.iter().map(|&(a, b)| a.zip(b)).collect::<Option<Vec<_>>>() {
            ds.z_latent = Some(Array2::from_shape_fn((n, 2), |(i, j)| {
                if j == 0 {
                    flat[i].0
                } else {
                    flat[i].1
                }
            }));
        }
        Ok(ds)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        let probs = AssignmentProbs::marginal(vec![0.5, 0.5]).unwrap();
        let mut ds = Dataset::new(
            array![[0.1, -2.0], [1.0 / 3.0, 4.5], [7.0, 0.0], [-0.25, 1e-17]],
            vec![0, 1, 1, 0],
            vec![1.5, -0.2, 3.0, 0.1 + 0.2],
            vec![Source::Rct, Source::Rct, Source::Obs, Source::Obs],
            probs,
        )
        .unwrap();
        ds.tau_true = Some(vec![0.5, 0.6, 0.7, 0.8]);
        ds
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = tiny();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.t, ds.t);
        assert_eq!(back.source, ds.source);
        assert_eq!(back.tau_true, ds.tau_true);
        assert_eq!(back.probs, ds.probs);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x_0,x_1,t,y,source,p_0,p_1,tau_true,z_0,z_1,u\n"));
    }

    #[test]
    fn split_is_per_source_and_seeded() {
        let ds = tiny();
        let (a, b) = ds.split_holdout(0.5, 3).unwrap();
        assert_eq!(a.count(Source::Rct), 1);
        assert_eq!(b.count(Source::Obs), 1);
        let (a2, _) = ds.split_holdout(0.5, 3).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn invalid_arm_rejected() {
        let probs = AssignmentProbs::marginal(vec![0.5, 0.5]).unwrap();
        let err = Dataset::new(array![[0.0]], vec![2], vec![0.0], vec![Source::Rct], probs);
        assert!(matches!(err, Err(FusionError::InvalidTreatment { .. })));
    }
}
