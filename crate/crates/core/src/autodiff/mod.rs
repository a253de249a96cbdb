//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
mod tape;
mod tensor;

pub use checkpoint::{
    checkpointed_rollout_backward, plain_rollout_backward, rollout_forward, CheckpointSchedule,
    ParamMode, RolloutGradient, RolloutStats, RolloutStep,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::error::Error;

    #[test]
    fn tanh_of_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.scalar_value(y).unwrap(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0]);
    }

    #[test]
    fn scatter_add_sums_per_target() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.scatter_add(v, Arc::from(vec![0, 0, 1]), 2).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 1]);
        assert_eq!(tape.value(s).data(), &[3.0, 3.0]);
        let bad = tape.scatter_add(v, Arc::from(vec![0, 0, 2]), 2);
        assert!(matches!(bad, Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn mean_of_four() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(v).unwrap();
        assert_eq!(tape.scalar_value(m).unwrap(), 2.5);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let y = tape.sum(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shape_errors_are_reported() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul(a, b).is_ok());
    }

    #[test]
    fn tape_is_single_use() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        assert!(matches!(tape.square(x), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn nan_reports_offending_operation() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = tape.sqrt(x).unwrap();
        match tape.backward(y) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "sqrt"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }

        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(800.0));
        let e = tape.exp(x).unwrap();
        let z = tape.scale(e, 0.0).unwrap();
        match tape.backward(z) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "scale"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn vars_from_other_tapes_are_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.square(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let r = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.value(r).shape(), &[4, 2]);
        let s = tape.slice(c, 1, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let loss = tape.dot(s, w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 1.0, 0.0, 0.5]);
        assert_eq!(g.wrt(b).data(), &[-1.0, 2.0]);
    }

    #[test]
    fn branch_signature_marks_kink_sides() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        tape.relu(x).unwrap();
        tape.clamp(x, -0.5, 0.5).unwrap();
        assert_eq!(tape.branch_signature(), vec![0, 0, 1, 0, 1, 2]);
    }
}
