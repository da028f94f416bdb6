use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Named sub-streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Suite,
    Init,
    Sampler,
    Data,
    Eval,
    Diagnostics,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Suite => 1,
            Stream::Init => 2,
            Stream::Sampler => 3,
            Stream::Data => 4,
            Stream::Eval => 5,
            Stream::Diagnostics => 6,
        }
    }
}

/// Seeded ChaCha8 stream. ChaCha is counter based, so `(seed, stream)` pairs
/// give independent and platform-stable sequences.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `stream_id` of `seed`; distinct ids never overlap.
    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Rng { inner }
    }

    pub fn stream(seed: u64, stream: Stream) -> Self {
        Self::with_stream(seed, stream.id())
    }

    /// Stream for one sub-run (a grid cell or a diagnostic batch).
    pub fn for_run(seed: u64, stream: Stream, run_id: u64) -> Self {
        Self::with_stream(seed, (run_id << 8) | stream.id())
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }
}
