//! Reverse-mode gradients on a tape, and the same gradient through a
//! checkpointed rollout.

use invdes::autodiff::{
    checkpointed_rollout_backward, plain_rollout_backward, CheckpointSchedule, ParamMode,
    RolloutStep, Tape, Tensor, Var,
};

/// x <- tanh(w * x) applied K times.
struct Damped;

impl RolloutStep for Damped {
    type Aux = ();

    fn step(
        &self,
        tape: &Tape,
        state: &[Var],
        _: &(),
        params: &[Var],
    ) -> invdes::Result<(Vec<Var>, ())> {
        Ok((vec![tape.tanh(tape.scalar_mul(params[0], state[0])?)?], ()))
    }
}

fn main() -> invdes::Result<()> {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let y = tape.sum(tape.mul(tape.sin(x)?, tape.exp(x)?)?)?;
    let g = tape.backward(y)?;
    println!("d/dx sum(sin(x) exp(x)) = {:?}", g.wrt(x).data());

    let initial = [Tensor::vector(vec![0.3, -0.2])];
    let params = [Tensor::scalar(1.3)];
    let loss = |t: &Tape, s: &[Var], _: &(), _: &[Var]| t.sum(t.square(s[0])?);
    let k = 16;
    let plain = plain_rollout_backward(
        &Damped,
        &initial,
        &(),
        &params,
        ParamMode::Differentiable,
        k,
        loss,
    )?;
    let ck = checkpointed_rollout_backward(
        &Damped,
        &initial,
        &(),
        &params,
        ParamMode::Differentiable,
        loss,
        &CheckpointSchedule::every(k, 4),
    )?;
    println!(
        "plain   dL/dw = {:?}",
        plain.params[0].as_ref().map(|t| t.data().to_vec())
    );
    println!(
        "checkpt dL/dw = {:?}",
        ck.params[0].as_ref().map(|t| t.data().to_vec())
    );
    println!(
        "forward steps {} (plain {}), stored states {}, peak tape nodes {} (plain {})",
        ck.stats.forward_steps,
        plain.stats.forward_steps,
        ck.stats.stored_states,
        ck.stats.peak_tape_nodes,
        plain.stats.peak_tape_nodes
    );
    Ok(())
}
