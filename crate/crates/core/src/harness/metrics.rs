//! Pairwise ground-truth and classifier matrices.

use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::descriptor::{compare, Descriptor};
use crate::detector::{DetectorError, DetectorModel, Rates};

/// Square symmetric 0/1 matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMatrix {
    pub n: usize,
    data: Vec<bool>,
}

impl BinaryMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool + Sync) -> Self {
        let rows: Vec<Vec<bool>> = (0..n).into_par_iter().map(|i| (0..n).map(|j| f(i, j)).collect()).collect();
        Self {
            n,
            data: rows.concat(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn diagonal_all_set(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i))
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn write_csv(&self, out: impl Write) -> io::Result<()> {
        let mut out = io::BufWriter::new(out);
        for i in 0..self.n {
            let row: Vec<&str> = (0..self.n).map(|j| if self.get(i, j) { "1" } else { "0" }).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    }

    /// Binary greymap; ones are white.
    pub fn write_pgm(&self, out: impl Write) -> io::Result<()> {
        let mut out = io::BufWriter::new(out);
        write!(out, "P5\n{} {}\n255\n", self.n, self.n)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        out.write_all(&bytes)?;
        out.flush()
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> io::Result<()> {
        let stem = stem.as_ref();
        self.write_csv(std::fs::File::create(stem.with_extension("csv"))?)?;
        self.write_pgm(std::fs::File::create(stem.with_extension("pgm"))?)
    }
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Entry `(i, j)` is set when the nodes are closer than `loop_distance`;
/// the diagonal is always set.
pub fn distance_matrix(positions: &[[f64; 3]], loop_distance: f64) -> BinaryMatrix {
    BinaryMatrix::from_fn(positions.len(), |i, j| i == j || distance(&positions[i], &positions[j]) < loop_distance)
}

/// Entry `(i, j)` is set when the detector fires for the pair. Each pair is
/// evaluated once and mirrored.
pub fn classification_matrix(descriptors: &[Descriptor], model: &DetectorModel, p_min: f64) -> Result<BinaryMatrix, DetectorError> {
    let n = descriptors.len();
    let upper: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| Ok(model.predict_proba(&compare(&descriptors[i], &descriptors[j])?)? > p_min))
                .collect::<Result<Vec<bool>, DetectorError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(BinaryMatrix::from_fn(n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        upper[a][b - a]
    }))
}

/// Detection and false-alarm rates of a classification matrix against the
/// ground truth, over the pairs `i < j`.
pub fn matrix_rates(classification: &BinaryMatrix, truth: &BinaryMatrix) -> Rates {
    assert_eq!(classification.n, truth.n);
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..truth.n {
        for j in i + 1..truth.n {
            probs.push(if classification.get(i, j) { 1.0 } else { 0.0 });
            labels.push(truth.get(i, j));
        }
    }
    Rates::from_predictions(&probs, &labels, 0.5)
}
