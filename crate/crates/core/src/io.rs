//! Serde helpers for the JSON artifact schemas.

use ndarray::Array2;
use serde::ser::{SerializeSeq, Serializer};

use crate::linalg::C64;

/// Serialize a matrix as a list of row lists.
pub fn ser_mat<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for row in m.rows() {
        seq.serialize_element(&row.to_vec())?;
    }
    seq.end()
}

/// Serialize eigenvalues as [re, im] pairs.
pub fn ser_eigs<S: Serializer>(eigs: &[C64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(eigs.len()))?;
    for l in eigs {
        seq.serialize_element(&[l.re, l.im])?;
    }
    seq.end()
}
