//! Central finite-difference checks of every operator in 64-bit mode.

use std::sync::Arc;

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::volume::grid::Voxel;

use super::ops::{Layout, Rulebook, Stencils};
use super::tape::{Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose gradient is
/// numerically zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Compares the reverse-mode gradient of `sum(f(inputs) * r)`, with a fixed
/// random `r`, against central differences on every input entry.
pub fn check(op: &str, inputs: &[Tensor<f64>], f: &Build, seed: u64) -> Result<GradCheck> {
    let forward = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<(f64, Tensor<f64>, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let r = match weights {
            Some(r) => r.clone(),
            None => {
                let mut rng = crate::rng::stream(seed, "gradcheck/weights");
                let n: usize = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?
            }
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        let loss = tape.sum(prod);
        let value = tape.data(loss)[0];
        let grads = if weights.is_none() {
            let g = tape.backward(loss)?;
            Some(
                vars.iter()
                    .zip(vals)
                    .map(|(&v, t)| g.get(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
                    .collect(),
            )
        } else {
            None
        };
        Ok((value, r, grads))
    };
    let (_, r, analytic) = forward(inputs, None)?;
    let analytic = analytic.expect("gradients requested");
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut vals = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..vals[k].len() {
            let orig = vals[k].data[i];
            vals[k].data[i] = orig + FD_EPS;
            let (lp, _, _) = forward(&vals, Some(&r))?;
            vals[k].data[i] = orig - FD_EPS;
            let (lm, _, _) = forward(&vals, Some(&r))?;
            vals[k].data[i] = orig;
            let num = (lp - lm) / (2.0 * FD_EPS);
            let err = (a[i] - num).abs() / a[i].abs().max(num.abs()).max(REL_FLOOR);
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok(GradCheck {
        op: op.to_string(),
        max_rel_error: worst,
        entries,
    })
}

fn random(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Distinct values at least 0.05 apart in random order, so that maxima and
/// clamps stay away from ties and kinks under the finite-difference step.
fn spaced(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64 + 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    Tensor::new(shape, v).expect("shape")
}

fn sparse_indices(rng: &mut crate::rng::Rng, res: u32, count: usize) -> Vec<Voxel> {
    let mut v: Vec<Voxel> = (0..count * 3)
        .map(|_| [rng.random_range(0..res), rng.random_range(0..res), rng.random_range(0..res)])
        .collect();
    v.sort_unstable();
    v.dedup();
    v.truncate(count);
    v
}

/// Runs the check for every operator.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = crate::rng::stream(seed, "gradcheck/inputs");
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &Build| -> Result<()> {
        out.push(check(name, &inputs, f, seed)?);
        Ok(())
    };

    run("add", vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", vec![random(&mut rng, &[5])], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("silu", vec![random(&mut rng, &[7])], &|t, v| Ok(t.silu(v[0])))?;
    run("clamp", vec![spaced(&mut rng, &[8])], &|t, v| Ok(t.clamp(v[0], -0.5, 0.3)))?;
    run("reshape", vec![random(&mut rng, &[2, 3])], &|t, v| t.reshape(v[0], &[3, 2]))?;
    run(
        "add_channel/first",
        vec![random(&mut rng, &[3, 4]), random(&mut rng, &[3])],
        &|t, v| t.add_channel(v[0], v[1], Layout::ChannelFirst),
    )?;
    run(
        "add_channel/last",
        vec![random(&mut rng, &[4, 3]), random(&mut rng, &[3])],
        &|t, v| t.add_channel(v[0], v[1], Layout::ChannelLast),
    )?;
    run("sum", vec![random(&mut rng, &[4])], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![random(&mut rng, &[4])], &|t, v| t.mean(v[0]))?;
    run("mse", vec![random(&mut rng, &[5]), random(&mut rng, &[5])], &|t, v| t.mse(v[0], v[1]))?;
    run(
        "masked_mse",
        vec![random(&mut rng, &[5]), random(&mut rng, &[5])],
        &|t, v| t.masked_mse(v[0], v[1], &[true, false, true, true, false]),
    )?;
    run("matmul", vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])], &|t, v| t.matmul(v[0], v[1]))?;
    run(
        "linear",
        vec![random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5])],
        &|t, v| t.linear(v[0], v[1], Some(v[2])),
    )?;
    run("transpose2d", vec![random(&mut rng, &[3, 4])], &|t, v| t.transpose2d(v[0]))?;
    run("max_axis", vec![spaced(&mut rng, &[2, 3, 4])], &|t, v| t.max_axis(v[0], 1))?;
    run("sum_axis", vec![random(&mut rng, &[2, 3, 4])], &|t, v| t.sum_axis(v[0], 2))?;
    run("mean_axis", vec![random(&mut rng, &[2, 3, 4])], &|t, v| t.mean_axis(v[0], 0))?;
    run(
        "concat",
        vec![random(&mut rng, &[2, 1, 3]), random(&mut rng, &[2, 2, 3])],
        &|t, v| t.concat(&[v[0], v[1]], 1),
    )?;
    run(
        "group_norm/first",
        vec![random(&mut rng, &[4, 2, 2, 2]), random(&mut rng, &[4]), random(&mut rng, &[4])],
        &|t, v| t.group_norm(v[0], v[1], v[2], 2, Layout::ChannelFirst),
    )?;
    run(
        "group_norm/last",
        vec![random(&mut rng, &[5, 4]), random(&mut rng, &[4]), random(&mut rng, &[4])],
        &|t, v| t.group_norm(v[0], v[1], v[2], 2, Layout::ChannelLast),
    )?;
    run(
        "conv3d/stride1",
        vec![random(&mut rng, &[2, 3, 3, 3]), random(&mut rng, &[2, 2, 3, 3, 3]), random(&mut rng, &[2])],
        &|t, v| t.conv3d(v[0], v[1], Some(v[2]), [1; 3], [1; 3]),
    )?;
    run(
        "conv3d/stride2",
        vec![random(&mut rng, &[2, 4, 4, 4]), random(&mut rng, &[3, 2, 3, 3, 3]), random(&mut rng, &[3])],
        &|t, v| t.conv3d(v[0], v[1], Some(v[2]), [2; 3], [1; 3]),
    )?;
    run(
        "conv2d/stride2",
        vec![random(&mut rng, &[2, 1, 6, 6]), random(&mut rng, &[2, 2, 1, 3, 3]), random(&mut rng, &[2])],
        &|t, v| t.conv3d(v[0], v[1], Some(v[2]), [1, 2, 2], [0, 1, 1]),
    )?;
    run(
        "conv_transpose3d",
        vec![random(&mut rng, &[2, 2, 2, 2]), random(&mut rng, &[2, 3, 2, 2, 2]), random(&mut rng, &[3])],
        &|t, v| t.conv_transpose3d(v[0], v[1], Some(v[2])),
    )?;

    let idx = sparse_indices(&mut rng, 4, 20);
    let n = idx.len();
    let sub = Arc::new(Rulebook::submanifold(&idx)?);
    run(
        "sparse_conv/submanifold",
        vec![random(&mut rng, &[n, 2]), random(&mut rng, &[27, 2, 3]), random(&mut rng, &[3])],
        &move |t, v| t.sparse_conv(v[0], v[1], Some(v[2]), sub.clone()),
    )?;
    let (parents, down) = Rulebook::downsample(&idx)?;
    let down = Arc::new(down);
    run(
        "sparse_conv/down",
        vec![random(&mut rng, &[n, 2]), random(&mut rng, &[8, 2, 3])],
        &move |t, v| t.sparse_conv(v[0], v[1], None, down.clone()),
    )?;
    let up = Arc::new(Rulebook::upsample(&parents, &idx)?);
    run(
        "sparse_conv/up",
        vec![random(&mut rng, &[parents.len(), 3]), random(&mut rng, &[8, 3, 2]), random(&mut rng, &[2])],
        &move |t, v| t.sparse_conv(v[0], v[1], Some(v[2]), up.clone()),
    )?;
    let rows = Arc::new(vec![0u32, 2, 2, 1]);
    run("gather_rows", vec![random(&mut rng, &[3, 2])], &move |t, v| t.gather_rows(v[0], rows.clone()))?;

    let pts: Vec<Option<[f64; 3]>> = (0..6)
        .map(|k| {
            if k == 5 {
                None
            } else {
                Some([rng.random_range(-0.5..3.5), rng.random_range(-0.5..2.5), rng.random_range(-0.5..1.5)])
            }
        })
        .collect();
    run("grid_sample", vec![random(&mut rng, &[2, 2, 3, 4])], &move |t, v| t.grid_sample(v[0], &pts))?;
    let st = Arc::new(Stencils::trilinear([2, 2, 2], &[Some([0.3, 0.6, 0.2]), Some([1.0, 0.5, 0.9])]));
    run("interpolate/rows", vec![random(&mut rng, &[8, 3])], &move |t, v| {
        t.interpolate(v[0], st.clone(), Layout::ChannelLast)
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_passes() {
        let results = run_all(7).unwrap();
        for r in &results {
            assert!(r.passed(), "{} max relative error {:e}", r.op, r.max_rel_error);
            assert!(r.entries > 0);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // Forward uses x^2 but the recorded backward claims 3x.
        let f: &Build = &|t, v| {
            let val = t.value(v[0]).data.iter().map(|x| x * x).collect();
            let shape = t.shape(v[0]).to_vec();
            Ok(t.push(
                "wrong",
                Tensor::new(&shape, val)?,
                &[v[0]],
                Box::new(|inp, _, g, _| vec![Some(inp[0].data.iter().zip(g).map(|(x, g)| 3.0 * x * g).collect())]),
            ))
        };
        let r = check("wrong", &[Tensor::new(&[2], vec![0.5, -0.7]).unwrap()], f, 1).unwrap();
        assert!(!r.passed());
    }
}
