//! Flat trainable-parameter storage with a named segment layout.

use std::sync::Arc;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// One named slice of the flat parameter vector. Matrices are stored
/// row-major with shape `(rows, cols)`; vectors and scalars use `cols == 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_matrix(&self) -> bool {
        self.rows > 1 && self.cols > 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl Layout {
    pub fn build(shapes: impl IntoIterator<Item = (String, usize, usize)>) -> Arc<Self> {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            segments.push(Segment {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        }
        Arc::new(Layout {
            segments,
            total: offset,
        })
    }

    pub fn of_single(name: &str, len: usize) -> Arc<Self> {
        Self::build([(name.to_string(), len, 1)])
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Flat ordered collection of all trainable values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub layout: Arc<Layout>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total;
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Self {
        assert_eq!(
            layout.total,
            values.len(),
            "value count does not match layout"
        );
        ParamVector { layout, values }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_layout(&self, other: &Self) {
        assert!(
            Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout,
            "parameter layouts differ"
        );
    }

    /// `self += a * other`, elementwise over matching layouts.
    pub fn add_scaled(&mut self, other: &Self, a: f64) {
        self.check_layout(other);
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for x in &mut self.values {
            *x *= a;
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn seg_slice(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.offset..seg.offset + seg.len()]
    }

    pub fn seg_slice_mut(&mut self, seg: &Segment) -> &mut [f64] {
        &mut self.values[seg.offset..seg.offset + seg.len()]
    }

    pub fn seg_matrix(&self, seg: &Segment) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((seg.rows, seg.cols), self.seg_slice(seg))
            .expect("segment shape mismatch")
    }

    pub fn seg_matrix_mut(&mut self, seg: &Segment) -> ArrayViewMut2<'_, f64> {
        let (rows, cols) = (seg.rows, seg.cols);
        ArrayViewMut2::from_shape((rows, cols), self.seg_slice_mut(seg))
            .expect("segment shape mismatch")
    }
}

// Serialize as {layout, values}; deserialization rebuilds the shared layout.
impl Serialize for ParamVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("ParamVector", 2)?;
        s.serialize_field("layout", self.layout.as_ref())?;
        s.serialize_field("values", &self.values)?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            layout: Layout,
            values: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        if raw.layout.total != raw.values.len() {
            return Err(serde::de::Error::custom("layout/value length mismatch"));
        }
        Ok(ParamVector {
            layout: Arc::new(raw.layout),
            values: raw.values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_total_is_sum_of_segments() {
        let layout = Layout::build([
            ("w".to_string(), 4, 3),
            ("b".to_string(), 4, 1),
            ("alpha".to_string(), 1, 1),
        ]);
        assert_eq!(layout.total, 17);
        assert_eq!(layout.segment("b").unwrap().offset, 12);
    }

    #[test]
    fn elementwise_ops_over_shared_layout() {
        let layout = Layout::of_single("p", 3);
        let mut a = ParamVector::from_values(layout.clone(), vec![1.0, 2.0, 3.0]);
        let b = ParamVector::from_values(layout, vec![0.5, -1.0, 2.0]);
        a.add_scaled(&b, 2.0);
        assert_eq!(a.values, vec![2.0, 0.0, 7.0]);
    }

    #[test]
    fn serde_roundtrip_preserves_bits() {
        let layout = Layout::build([("w".to_string(), 2, 2)]);
        let p = ParamVector::from_values(layout, vec![0.1, -0.2, 1.0 / 3.0, 4e-17]);
        let json = serde_json::to_string(&p).unwrap();
        let q: ParamVector = serde_json::from_str(&json).unwrap();
        assert_eq!(p.values, q.values);
        assert_eq!(*p.layout, *q.layout);
    }
}
