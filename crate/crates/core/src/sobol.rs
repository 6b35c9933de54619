//! Sobol low-discrepancy sequence (Gray-code order, 32-bit resolution).
//!
//! Direction numbers are the first rows of the Joe-Kuo table; dimension 1
//! is the van der Corput sequence in base 2.

const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4294967296.0; // 2^-32

/// (degree s, coefficient bits a, initial m values) per dimension >= 2.
const JOE_KUO: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
];

/// Largest supported dimension.
pub(crate) const MAX_DIM: usize = JOE_KUO.len() + 1;

pub(crate) struct SobolSeq {
    dim: usize,
    // direction integers, scaled to 32 bits: v[d][i]
    v: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl SobolSeq {
    /// Panics if `dim` exceeds [`MAX_DIM`]; callers validate first.
    pub(crate) fn new(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "sobol dimension out of range");
        let mut v = Vec::with_capacity(dim);
        // Dimension 1: van der Corput, all m_i = 1.
        let mut v0 = [0u32; BITS];
        for (i, slot) in v0.iter_mut().enumerate() {
            *slot = 1u32 << (BITS - 1 - i);
        }
        v.push(v0);
        for &(s, a, m_init) in JOE_KUO.iter().take(dim.saturating_sub(1)) {
            let s = s as usize;
            let mut vd = [0u32; BITS];
            for i in 0..BITS {
                if i < s {
                    vd[i] = m_init[i] << (BITS - 1 - i);
                } else {
                    let mut val = vd[i - s] ^ (vd[i - s] >> s);
                    for k in 1..s {
                        if (a >> (s - 1 - k)) & 1 == 1 {
                            val ^= vd[i - k];
                        }
                    }
                    vd[i] = val;
                }
            }
            v.push(vd);
        }
        SobolSeq {
            dim,
            v,
            state: vec![0; dim],
            index: 0,
        }
    }

    /// Next point in [0,1)^dim. The first returned point is the origin.
    pub(crate) fn next_point(&mut self) -> Vec<f64> {
        let out: Vec<f64> = self.state.iter().map(|&s| s as f64 * SCALE).collect();
        // Gray-code update: flip the direction of the lowest zero bit.
        let c = (!self.index).trailing_zeros() as usize;
        if c < BITS {
            for d in 0..self.dim {
                self.state[d] ^= self.v[d][c];
            }
        }
        self.index += 1;
        out
    }

    /// The first `n` points, skipping `skip` leading ones.
    pub(crate) fn points(dim: usize, n: usize, skip: usize) -> Vec<Vec<f64>> {
        let mut seq = SobolSeq::new(dim);
        for _ in 0..skip {
            seq.next_point();
        }
        (0..n).map(|_| seq.next_point()).collect()
    }
}
