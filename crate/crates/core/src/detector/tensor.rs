//! Minimal named-tensor storage for the detector network. Row-major,
//! f64 throughout so gradient checks hold at machine precision.

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    #[inline]
    pub fn at3_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        &mut self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    /// Matrix-vector product for a 2-D tensor: y = self * x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.dims[0], self.dims[1]);
        debug_assert_eq!(cols, x.len());
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = self^T * x for a 2-D tensor.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.dims[0], self.dims[1]);
        debug_assert_eq!(rows, x.len());
        let mut y = vec![0.0; cols];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let xr = x[r];
            for (c, a) in row.iter().enumerate() {
                y[c] += a * xr;
            }
        }
        y
    }
}
