//! JSON form of matrices: `{"rows": r, "cols": c, "data": [row-major]}`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for MatJson {
    fn from(m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        MatJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatJson {
    pub fn to_mat(&self) -> Result<Mat, String> {
        if self.rows * self.cols != self.data.len() {
            return Err(format!(
                "matrix declares {}x{} but has {} entries",
                self.rows,
                self.cols,
                self.data.len()
            ));
        }
        Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub mod mat {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        MatJson::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        MatJson::deserialize(d)?.to_mat().map_err(serde::de::Error::custom)
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod array4 {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[Mat; 4], s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(MatJson::from).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[Mat; 4], D::Error> {
        let v = Vec::<MatJson>::deserialize(d)?;
        if v.len() != 4 {
            return Err(serde::de::Error::custom(format!(
                "expected 4 matrices, got {}",
                v.len()
            )));
        }
        let mats = v
            .iter()
            .map(|m| m.to_mat())
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        Ok([mats[0].clone(), mats[1].clone(), mats[2].clone(), mats[3].clone()])
    }
}
