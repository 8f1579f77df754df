//! Finite-difference checks for every differentiable op and both model losses.

use super::{corpus_a, fd_check, fd_check_model, small_chatbot, small_vqg_config, FD_TOL, VQG_QUESTIONS};
use elisabot::autodiff::{Tape, Var};
use elisabot::chatbot::ChatbotModel;
use elisabot::data::{pseudo_encoder, DialoguePair};
use elisabot::nn::{
    additive_attention, gru_step, lstm_step, AttentionParams, AttentionVars, GruParams, GruVars, LstmParams, LstmVars, ParamSet,
};
use elisabot::tensor::Tensor;
use elisabot::vqg::{question_vocabulary, VqgExample, VqgModel};
use elisabot::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DRAWS: u64 = 20;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Reduces a tensor-valued node to a scalar with fixed random weights so
/// every output element contributes a distinct amount.
fn project(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = tape.input(Tensor::uniform(&shape, 1.0, &mut rng));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn check_op<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let params: Vec<Tensor> = shapes.iter().map(|s| rand_t(s, &mut rng)).collect();
        let err = fd_check(&params, |tape, v| {
            let out = f(tape, v)?;
            project(tape, out, draw)
        });
        assert!(err <= FD_TOL, "{name}: draw {draw} relative error {err:e}");
    }
}

pub fn elementwise_ops() {
    check_op("add", &[&[4], &[4]], |t, v| t.add(v[0], v[1]));
    check_op("sub", &[&[4], &[4]], |t, v| t.sub(v[0], v[1]));
    check_op("mul", &[&[3, 2], &[3, 2]], |t, v| t.mul(v[0], v[1]));
    check_op("scale", &[&[5]], |t, v| Ok(t.scale(v[0], -1.7)));
    check_op("one_minus", &[&[5]], |t, v| Ok(t.one_minus(v[0])));
    check_op("sigmoid", &[&[5]], |t, v| Ok(t.sigmoid(v[0])));
    check_op("tanh", &[&[5]], |t, v| Ok(t.tanh(v[0])));
}

pub fn linear_algebra_ops() {
    check_op("matvec", &[&[3, 4], &[4]], |t, v| t.matvec(v[0], v[1]));
    check_op("matmul_t", &[&[5, 4], &[3, 4]], |t, v| t.matmul_t(v[0], v[1]));
    check_op("add_row_broadcast", &[&[5, 3], &[3]], |t, v| t.add_row_broadcast(v[0], v[1]));
    check_op("concat", &[&[2], &[3], &[1]], |t, v| t.concat(v));
    check_op("stack_rows", &[&[3], &[3], &[3]], |t, v| t.stack_rows(v));
    check_op("gather", &[&[6, 3]], |t, v| t.gather(v[0], 4));
    check_op("weighted_row_sum", &[&[4], &[4, 3]], |t, v| t.weighted_row_sum(v[0], v[1]));
    check_op("mean_rows", &[&[4, 3]], |t, v| t.mean_rows(v[0]));
    check_op("add_n", &[&[3], &[3], &[3]], |t, v| t.add_n(v));
}

pub fn reductions_and_losses() {
    check_op("softmax", &[&[6]], |t, v| t.softmax(v[0]));
    check_op("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0])));
    for target in 0..4 {
        check_op("cross_entropy", &[&[4]], move |t, v| t.cross_entropy(v[0], target));
    }
    // loss = sum(tanh(W·x)), the canonical example.
    check_op("sum_tanh_wx", &[&[3, 4], &[4]], |t, v| {
        let y = t.matvec(v[0], v[1])?;
        let y = t.tanh(y);
        Ok(t.sum(y))
    });
    // A parameter used twice accumulates both paths.
    check_op("reuse", &[&[3]], |t, v| {
        let a = t.mul(v[0], v[0])?;
        let b = t.tanh(v[0]);
        t.add(a, b)
    });
}

pub fn recurrent_cells_and_attention() {
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let gru = GruParams::init(3, 4, &mut rng);
        let x = rand_t(&[3], &mut rng);
        let h = rand_t(&[4], &mut rng);
        let mut params: Vec<Tensor> = ParamSet::tensors(&gru).into_iter().cloned().collect();
        params.push(x);
        params.push(h);
        let err = fd_check(&params, |tape, v| {
            let vars = GruVars::from_slots(&v[..9], 3, 4);
            let out = gru_step(tape, v[9], v[10], &vars)?;
            project(tape, out, draw)
        });
        assert!(err <= FD_TOL, "gru draw {draw}: {err:e}");

        let lstm = LstmParams::init(3, 4, &mut rng);
        let mut params: Vec<Tensor> = ParamSet::tensors(&lstm).into_iter().cloned().collect();
        params.extend([rand_t(&[3], &mut rng), rand_t(&[4], &mut rng), rand_t(&[4], &mut rng)]);
        let err = fd_check(&params, |tape, v| {
            let vars = LstmVars::from_slots(&v[..12], 3, 4);
            let (h, c) = lstm_step(tape, v[12], v[13], v[14], &vars)?;
            let both = tape.concat(&[h, c])?;
            project(tape, both, draw)
        });
        assert!(err <= FD_TOL, "lstm draw {draw}: {err:e}");

        let att = AttentionParams::init(4, 3, 5, &mut rng);
        let mut params: Vec<Tensor> = ParamSet::tensors(&att).into_iter().cloned().collect();
        params.extend([rand_t(&[4], &mut rng), rand_t(&[6, 3], &mut rng)]);
        let err = fd_check(&params, |tape, v| {
            let vars = AttentionVars::from_slots(&v[..3]);
            let keys = vars.project_annotations(tape, v[4])?;
            let (w, ctx) = additive_attention(tape, v[3], v[4], keys, &vars)?;
            let both = tape.concat(&[w, ctx])?;
            project(tape, both, draw)
        });
        assert!(err <= FD_TOL, "attention draw {draw}: {err:e}");
    }
}

pub fn vqg_loss_gradient() {
    let vocab = question_vocabulary(&VQG_QUESTIONS[..4], 1).unwrap();
    for draw in 0..DRAWS {
        let model = VqgModel::new(small_vqg_config(5, 4), vocab.clone(), draw).unwrap();
        let grid = pseudo_encoder(&format!("g{draw}"), 3, 5).unwrap();
        let ex = VqgExample {
            target: model.encode_question(VQG_QUESTIONS[draw as usize % 4]),
            grid,
        };
        let err = fd_check_model(&model, &ex);
        assert!(err <= FD_TOL, "vqg draw {draw}: {err:e}");
    }
}

pub fn chatbot_loss_gradient() {
    let pairs: Vec<DialoguePair> = corpus_a().into_iter().step_by(13).collect();
    for draw in 0..DRAWS {
        let model: ChatbotModel = small_chatbot(&pairs, 4, draw);
        let ex = model.example(&pairs[draw as usize % pairs.len()]).unwrap();
        let err = fd_check_model(&model, &ex);
        assert!(err <= FD_TOL, "chatbot draw {draw}: {err:e}");
    }
}
