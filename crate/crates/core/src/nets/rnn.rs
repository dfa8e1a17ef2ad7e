//! Fully-connected memory RNN, the fast second model for scheduler tests.
//!
//! One step: `m_t = tanh(x_t W_m)`, and the loss is the squared error of
//! a linear readout of the mean of `[x_t, m_1, ..., m_{t-1}]` against a
//! per-segment target.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::nets::{SegmentModel, StepOutput};
use crate::params::{BoundParams, ParamSet};
use crate::rng::seed_rng;
use crate::tape::{Tape, TapeResult, TensorId};

#[derive(Debug, Clone)]
pub struct RnnSegment {
    /// Input features, length `dim`.
    pub x: Vec<f64>,
    /// Regression target, length `out_dim`.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ToyRnn {
    pub dim: usize,
    pub out_dim: usize,
}

impl Default for ToyRnn {
    fn default() -> Self {
        ToyRnn { dim: 8, out_dim: 4 }
    }
}

impl ToyRnn {
    /// Random segments for `t_count` steps.
    pub fn random_segments(&self, t_count: usize, seed: u64) -> Vec<RnnSegment> {
        let mut rng = seed_rng(seed);
        (0..t_count)
            .map(|_| RnnSegment {
                x: (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: (0..self.out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect()
    }
}

impl SegmentModel for ToyRnn {
    type Input = RnnSegment;

    fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        input: &Self::Input,
        memories: &[Vec<TensorId>],
    ) -> TapeResult<StepOutput> {
        let x = tape.constant(input.x.clone(), vec![1, self.dim]);
        let memory = {
            let pre = tape.matmul(x, bound.id("w_mem"))?;
            tape.tanh(pre)
        };

        // Mean over [x_t, m_1, ..., m_{t-1}] via a constant averaging row.
        let mut rows = vec![x];
        rows.extend(memories.iter().map(|m| m[0]));
        let stacked = tape.concat(&rows, 0)?;
        let n = rows.len();
        let avg = tape.constant(vec![1.0 / n as f64; n], vec![1, n]);
        let pooled = tape.matmul(avg, stacked)?;

        let pred = tape.matmul(pooled, bound.id("w_out"))?;
        let target = tape.constant(input.target.clone(), vec![1, self.out_dim]);
        let neg_target = tape.scale(target, -1.0);
        let diff = tape.add(pred, neg_target)?;
        let loss = tape.sum_squares(diff);

        Ok(StepOutput { loss, memory })
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = seed_rng(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let mut params = ParamSet::new();
        let w_mem: Vec<f64> = (0..self.dim * self.dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let w_out: Vec<f64> = (0..self.dim * self.out_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        params.insert("w_mem", w_mem, vec![self.dim, self.dim], true);
        params.insert("w_out", w_out, vec![self.dim, self.out_dim], true);
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_memories_uses_input_alone() {
        let model = ToyRnn::default();
        let params = model.init_params(1);
        let seg = &model.random_segments(1, 2)[0];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, seg, &[]).unwrap();
        assert!(tape.values(out.loss)[0] >= 0.0);
        assert_eq!(tape.shape(out.memory), &[1, model.dim]);
    }

    #[test]
    fn zero_weight_matrix_gives_zero_memory() {
        let model = ToyRnn::default();
        let mut params = model.init_params(1);
        params.get_mut("w_mem").values.iter_mut().for_each(|v| *v = 0.0);
        let seg = &model.random_segments(1, 2)[0];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, seg, &[]).unwrap();
        assert!(tape.values(out.memory).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn memory_is_independent_of_past_memories() {
        let model = ToyRnn::default();
        let params = model.init_params(1);
        let segs = model.random_segments(2, 2);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let m1 = tape.leaf(vec![0.3; model.dim], vec![1, model.dim], true);
        let out_a = model
            .forward(&mut tape, &bound, &segs[1], &[vec![m1]])
            .unwrap();
        let m1_perturbed = tape.leaf(vec![-5.0; model.dim], vec![1, model.dim], true);
        let out_b = model
            .forward(&mut tape, &bound, &segs[1], &[vec![m1_perturbed]])
            .unwrap();
        assert_eq!(tape.values(out_a.memory), tape.values(out_b.memory));
        assert_ne!(tape.values(out_a.loss), tape.values(out_b.loss));
    }
}
