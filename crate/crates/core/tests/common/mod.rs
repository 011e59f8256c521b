//! Shared finite-difference harness for the gradient suites: randomized
//! per-op cases and a two-stage mini network with a shared trunk and two
//! decoder branches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemsplit_core::tensor::{
    add, batch_norm, concat_channels, conv2d, gradcheck::check_gradients, l1_loss, leaky_relu,
    nn_upsample2x, relu, scale, sum_all, BatchNormParams, Conv2dParams, Mode, Tensor,
};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values bounded away from zero (activation kinks).
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.0)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn track(result: &mut SuiteResult, report: stemsplit_core::tensor::gradcheck::GradCheckReport) {
    result.cases += 1;
    result.checked += report.checked;
    if report.max_rel_err > result.max_rel_err {
        result.max_rel_err = report.max_rel_err;
    }
}

pub fn suite_conv2d(cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let mut result = SuiteResult {
        name: "conv2d",
        cases: 0,
        checked: 0,
        max_rel_err: 0.0,
    };
    while result.cases < cases {
        let (n, cin, cout) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let (h, w) = (rng.gen_range(3..7usize), rng.gen_range(3..7usize));
        let (kh, kw) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let (sh, sw) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
        let (ph, pw) = (rng.gen_range(0..2usize), rng.gen_range(0..2usize));
        if h + 2 * ph < kh || w + 2 * pw < kw {
            continue;
        }
        let x = rand_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0).with_grad();
        let wt = rand_tensor(&mut rng, &[cout, cin, kh, kw], -0.7, 0.7).with_grad();
        let b = rand_tensor(&mut rng, &[cout], -0.5, 0.5).with_grad();
        // Offset target keeps the L1 sign field constant under perturbation.
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let target = rand_tensor(&mut rng, &[n, cout, oh, ow], 9.0, 10.0);
        let params = [x.clone(), wt.clone(), b.clone()];
        let report = check_gradients(
            &params,
            || l1_loss(&conv2d(&x, &wt, &b, (sh, sw), (ph, pw))?, &target),
            FD_STEP,
            24,
        )
        .unwrap();
        track(&mut result, report);
    }
    result
}

pub fn suite_batch_norm(cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB9);
    let mut result = SuiteResult {
        name: "batch_norm",
        cases: 0,
        checked: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..cases {
        let (n, c) = (rng.gen_range(2..4usize), rng.gen_range(1..4usize));
        let (h, w) = (rng.gen_range(2..5usize), rng.gen_range(2..5usize));
        let x = rand_tensor(&mut rng, &[n, c, h, w], -2.0, 2.0).with_grad();
        let bn = BatchNormParams::new(c);
        // Non-trivial gamma/beta so their gradients are exercised too.
        bn.gamma.set_data(
            &(0..c)
                .map(|_| rng.gen_range(0.5..1.5))
                .collect::<Vec<f64>>(),
        );
        bn.beta.set_data(
            &(0..c)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect::<Vec<f64>>(),
        );
        let target = rand_tensor(&mut rng, &[n, c, h, w], 9.0, 10.0);
        let params = [x.clone(), bn.gamma.clone(), bn.beta.clone()];
        let report = check_gradients(
            &params,
            || l1_loss(&batch_norm(&x, &bn, Mode::Train)?, &target),
            FD_STEP,
            24,
        )
        .unwrap();
        track(&mut result, report);
    }
    result
}

pub fn suite_activations(cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC);
    let mut result = SuiteResult {
        name: "leaky_relu/relu",
        cases: 0,
        checked: 0,
        max_rel_err: 0.0,
    };
    for i in 0..cases {
        let shape = [rng.gen_range(1..3usize), rng.gen_range(1..4usize), 3, 4];
        let x = rand_tensor_off_kink(&mut rng, &shape).with_grad();
        let target = rand_tensor(&mut rng, &shape, 9.0, 10.0);
        let leaky = i % 2 == 0;
        let report = check_gradients(
            &[x.clone()],
            || {
                let y = if leaky { leaky_relu(&x, 0.1) } else { relu(&x) };
                l1_loss(&y, &target)
            },
            FD_STEP,
            24,
        )
        .unwrap();
        track(&mut result, report);
    }
    result
}

pub fn suite_upsample(cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2A);
    let mut result = SuiteResult {
        name: "nn_upsample2x",
        cases: 0,
        checked: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..cases {
        let shape = [
            rng.gen_range(1..3usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..5usize),
        ];
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0).with_grad();
        let target = rand_tensor(
            &mut rng,
            &[shape[0], shape[1], 2 * shape[2], 2 * shape[3]],
            9.0,
            10.0,
        );
        let report = check_gradients(
            &[x.clone()],
            || l1_loss(&nn_upsample2x(&x)?, &target),
            FD_STEP,
            24,
        )
        .unwrap();
        track(&mut result, report);
    }
    result
}

pub fn suite_concat(cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCC);
    let mut result = SuiteResult {
        name: "concat_channels",
        cases: 0,
        checked: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..cases {
        let (n, h, w) = (
            rng.gen_range(1..3usize),
            rng.gen_range(2..4usize),
            rng.gen_range(2..4usize),
        );
        let (ca, cb) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let a = rand_tensor(&mut rng, &[n, ca, h, w], -1.0, 1.0).with_grad();
        let b = rand_tensor(&mut rng, &[n, cb, h, w], -1.0, 1.0).with_grad();
        let target = rand_tensor(&mut rng, &[n, ca + cb, h, w], 9.0, 10.0);
        let report = check_gradients(
            &[a.clone(), b.clone()],
            || l1_loss(&concat_channels(&a, &b)?, &target),
            FD_STEP,
            24,
        )
        .unwrap();
        track(&mut result, report);
    }
    result
}

pub fn suite_l1_and_glue(cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11);
    let mut result = SuiteResult {
        name: "l1_loss/sum/add/scale",
        cases: 0,
        checked: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..cases {
        let shape = [2, rng.gen_range(1..4usize), 3, rng.gen_range(2..5usize)];
        let p = rand_tensor(&mut rng, &shape, 2.0, 3.0).with_grad();
        let t = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        // loss = 0.5 * l1(p, t) + sum(p) exercises all glue ops at once.
        let report = check_gradients(
            &[p.clone()],
            || add(&scale(&l1_loss(&p, &t)?, 0.5), &sum_all(&p)),
            FD_STEP,
            24,
        )
        .unwrap();
        track(&mut result, report);
    }
    result
}

struct MiniBlock {
    conv: Conv2dParams,
    bn: BatchNormParams,
}

impl MiniBlock {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize)) -> MiniBlock {
        let weight = rand_tensor(rng, &[cout, cin, k.0, k.1], -0.4, 0.4).with_grad();
        let bias = rand_tensor(rng, &[cout], -0.2, 0.2).with_grad();
        MiniBlock {
            conv: Conv2dParams {
                weight,
                bias,
                stride: s,
                padding: p,
            },
            bn: BatchNormParams::new(cout),
        }
    }

    fn forward(&self, x: &Tensor) -> stemsplit_core::Result<Tensor> {
        Ok(leaky_relu(
            &batch_norm(&self.conv.apply(x)?, &self.bn, Mode::Train)?,
            0.1,
        ))
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.conv.weight.clone(),
            self.conv.bias.clone(),
            self.bn.gamma.clone(),
            self.bn.beta.clone(),
        ]
    }
}

/// Two-downsample trunk shared by two decoder branches, finite-difference
/// checked over every parameter.
pub fn suite_mini_shared_network() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3117);
    // Trunk: full-res conv, then two downsampling stages.
    let b0 = MiniBlock::new(&mut rng, 2, 3, (3, 2), (1, 1), (1, 0));
    let d1 = MiniBlock::new(&mut rng, 3, 4, (4, 4), (2, 2), (1, 1));
    let c1 = MiniBlock::new(&mut rng, 4, 4, (3, 3), (1, 1), (1, 1));
    let d2 = MiniBlock::new(&mut rng, 4, 6, (4, 4), (2, 2), (1, 1));
    let c2 = MiniBlock::new(&mut rng, 6, 6, (3, 3), (1, 1), (1, 1));
    // Two identically-shaped branches with separate parameters; the last
    // layer is a bare conv acting as the output head.
    let mk_branch = |rng: &mut ChaCha8Rng| {
        let head = Conv2dParams {
            weight: rand_tensor(rng, &[2, 6, 3, 2], -0.4, 0.4).with_grad(),
            bias: rand_tensor(rng, &[2], -0.2, 0.2).with_grad(),
            stride: (1, 1),
            padding: (1, 1),
        };
        (
            MiniBlock::new(rng, 6, 4, (3, 3), (1, 1), (1, 1)),
            MiniBlock::new(rng, 8, 3, (3, 3), (1, 1), (1, 1)),
            head,
        )
    };
    let branch_a = mk_branch(&mut rng);
    let branch_b = mk_branch(&mut rng);

    let x = rand_tensor(&mut rng, &[1, 2, 8, 9], -1.0, 1.0);
    let target_a = rand_tensor(&mut rng, &[1, 2, 8, 9], 9.0, 10.0);
    let target_b = rand_tensor(&mut rng, &[1, 2, 8, 9], 9.0, 10.0);

    let mut params = Vec::new();
    for blk in [&b0, &d1, &c1, &d2, &c2] {
        params.extend(blk.params());
    }
    for (u1, u2, head) in [&branch_a, &branch_b] {
        params.extend(u1.params());
        params.extend(u2.params());
        params.push(head.weight.clone());
        params.push(head.bias.clone());
    }

    let forward = || {
        let skip0 = b0.forward(&x)?;
        let s1 = c1.forward(&d1.forward(&skip0)?)?;
        let bottleneck = c2.forward(&d2.forward(&s1)?)?;
        let mut losses = Vec::new();
        for ((u1, u2, head), target) in [(&branch_a, &target_a), (&branch_b, &target_b)] {
            let y = u1.forward(&nn_upsample2x(&bottleneck)?)?;
            let y = concat_channels(&y, &s1)?;
            let y = u2.forward(&nn_upsample2x(&y)?)?;
            let y = concat_channels(&y, &skip0)?;
            let y = relu(&head.apply(&y)?);
            losses.push(l1_loss(&y, target)?);
        }
        add(&losses[0], &losses[1])
    };
    let report = check_gradients(&params, forward, FD_STEP, 6).unwrap();
    SuiteResult {
        name: "mini shared network",
        cases: 1,
        checked: report.checked,
        max_rel_err: report.max_rel_err,
    }
}

pub fn all_suites(cases_per_op: usize) -> Vec<SuiteResult> {
    vec![
        suite_conv2d(cases_per_op),
        suite_batch_norm(cases_per_op),
        suite_activations(cases_per_op),
        suite_upsample(cases_per_op),
        suite_concat(cases_per_op),
        suite_l1_and_glue(cases_per_op),
        suite_mini_shared_network(),
    ]
}
