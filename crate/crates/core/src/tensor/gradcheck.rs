//! Central finite-difference gradient checking.
//!
//! A [`GradCase`] builds random instances of a scalar function of several
//! tensors. [`check_instance`] compares tape gradients against
//! `(f(x+h) − f(x−h)) / 2h` for every input coordinate, using the norm-wise
//! relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.

use std::time::{Duration, Instant};

use rand::Rng as _;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One concrete function plus the point at which to check it.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub f: Build,
}

pub struct GradCase {
    pub name: &'static str,
    pub make: fn(&mut Rng) -> Instance,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub tol: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

fn evaluate(inst: &Instance, inputs: &[Tensor], fault: Option<OpKind>) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (inst.f)(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract("gradcheck function must return a scalar"));
    }
    Ok((tape, vars, out))
}

/// Maximum relative error over all inputs of one instance.
pub fn check_instance(inst: &Instance, h: f64, fault: Option<OpKind>) -> Result<f64> {
    let (mut tape, vars, out) = evaluate(inst, &inst.inputs, fault)?;
    tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = inst.inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; inst.inputs[i].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inst.inputs[i].len() {
            let x0 = inst.inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = scalar(inst, &probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let fm = scalar(inst, &probe)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn scalar(inst: &Instance, inputs: &[Tensor]) -> Result<f64> {
    let (tape, _, out) = evaluate(inst, inputs, None)?;
    Ok(tape.value(out).data()[0])
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Runs `instances` random instances of every case.
pub fn run_suite(
    cases: &[GradCase],
    instances: usize,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<SuiteReport> {
    if cases.is_empty() {
        return Err(Error::contract("gradient check registry is empty"));
    }
    let mut reports = Vec::with_capacity(cases.len());
    for (ci, case) in cases.iter().enumerate() {
        let start = Instant::now();
        let mut rng = rng::stream(seed, "gradcheck", ci as u64, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let inst = (case.make)(&mut rng);
            let e = check_instance(&inst, DEFAULT_STEP, fault)?;
            worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
        }
        reports.push(CaseReport {
            name: case.name,
            instances,
            max_rel_err: worst,
            passed: worst < DEFAULT_TOL,
            elapsed: start.elapsed(),
        });
    }
    Ok(SuiteReport {
        cases: reports,
        tol: DEFAULT_TOL,
    })
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Weights the output by a fixed random tensor so every Jacobian entry is
/// exercised, then sums to a scalar.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

macro_rules! unary_case {
    ($name:literal, $method:ident, $min_width:literal) => {
        GradCase {
            name: $name,
            make: |rng| {
                let shape = [dim(rng, 1, 3), dim(rng, $min_width, 5)];
                let w = randn(rng, &shape);
                Instance {
                    inputs: vec![randn(rng, &shape)],
                    f: Box::new(move |t, v| {
                        let y = t.$method(v[0]);
                        project(t, y, &w)
                    }),
                }
            },
        }
    };
}

/// Finite-difference cases for every primitive op.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            make: |rng| {
                let (r, c) = (dim(rng, 1, 3), dim(rng, 2, 4));
                let w = randn(rng, &[r, c]);
                Instance {
                    inputs: vec![randn(rng, &[r, c]), randn(rng, &[c])],
                    f: Box::new(move |t, v| {
                        let y = t.add(v[0], v[1])?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "sub",
            make: |rng| {
                let (r, c) = (dim(rng, 1, 3), dim(rng, 2, 4));
                let w = randn(rng, &[r, c]);
                Instance {
                    inputs: vec![randn(rng, &[r, 1]), randn(rng, &[r, c])],
                    f: Box::new(move |t, v| {
                        let y = t.sub(v[0], v[1])?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "mul",
            make: |rng| {
                let (r, c) = (dim(rng, 1, 3), dim(rng, 2, 4));
                let w = randn(rng, &[r, c]);
                Instance {
                    inputs: vec![randn(rng, &[r, c]), randn(rng, &[1, c])],
                    f: Box::new(move |t, v| {
                        let y = t.mul(v[0], v[1])?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "scale",
            make: |rng| {
                let n = dim(rng, 2, 6);
                let s: f64 = rng.random_range(-3.0..3.0);
                let w = randn(rng, &[n]);
                Instance {
                    inputs: vec![randn(rng, &[n])],
                    f: Box::new(move |t, v| {
                        let y = t.scale(v[0], s);
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "matmul",
            make: |rng| {
                let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
                let w = randn(rng, &[m, n]);
                Instance {
                    inputs: vec![randn(rng, &[m, k]), randn(rng, &[k, n])],
                    f: Box::new(move |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "transpose",
            make: |rng| {
                let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
                let w = randn(rng, &[n, m]);
                Instance {
                    inputs: vec![randn(rng, &[m, n])],
                    f: Box::new(move |t, v| {
                        let y = t.transpose(v[0])?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        unary_case!("relu", relu, 1),
        unary_case!("gelu", gelu, 1),
        unary_case!("softmax", softmax, 2),
        // Width 2 is degenerate: the normalized row is always (±1, ∓1).
        unary_case!("layer_norm", layer_norm, 3),
        unary_case!("l2_normalize", l2_normalize, 1),
        GradCase {
            name: "sum",
            make: |rng| {
                let n = dim(rng, 1, 6);
                Instance {
                    inputs: vec![randn(rng, &[n, 2])],
                    f: Box::new(|t, v| {
                        let s = t.mul(v[0], v[0])?;
                        Ok(t.sum(s))
                    }),
                }
            },
        },
        GradCase {
            name: "mean",
            make: |rng| {
                let n = dim(rng, 1, 6);
                Instance {
                    inputs: vec![randn(rng, &[n])],
                    f: Box::new(|t, v| {
                        let s = t.mul(v[0], v[0])?;
                        Ok(t.mean(s))
                    }),
                }
            },
        },
        GradCase {
            name: "sum_last",
            make: |rng| {
                let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
                let w = randn(rng, &[r]);
                Instance {
                    inputs: vec![randn(rng, &[r, c])],
                    f: Box::new(move |t, v| {
                        let y = t.sum_last(v[0]);
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "mean_last",
            make: |rng| {
                let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
                let w = randn(rng, &[a, b]);
                Instance {
                    inputs: vec![randn(rng, &[a, b, c])],
                    f: Box::new(move |t, v| {
                        let y = t.mean_last(v[0]);
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "reshape",
            make: |rng| {
                let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
                let w = randn(rng, &[c, r]);
                Instance {
                    inputs: vec![randn(rng, &[r, c])],
                    f: Box::new(move |t, v| {
                        let y = t.reshape(v[0], &[c, r])?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "concat",
            make: |rng| {
                let (r, c1, c2) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
                let axis = rng.random_range(0..2usize);
                let (s1, s2, so) = if axis == 1 {
                    ([r, c1], [r, c2], [r, c1 + c2])
                } else {
                    ([c1, r], [c2, r], [c1 + c2, r])
                };
                let w = randn(rng, &so);
                Instance {
                    inputs: vec![randn(rng, &s1), randn(rng, &s2)],
                    f: Box::new(move |t, v| {
                        let y = t.concat(&[v[0], v[1]], axis)?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "narrow",
            make: |rng| {
                let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
                let start = rng.random_range(0..c - 1);
                let len = rng.random_range(1..=c - start);
                let w = randn(rng, &[r, len]);
                Instance {
                    inputs: vec![randn(rng, &[r, c])],
                    f: Box::new(move |t, v| {
                        let y = t.narrow(v[0], 1, start, len)?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "gather_rows",
            make: |rng| {
                let (r, c) = (dim(rng, 2, 4), dim(rng, 1, 3));
                let k = dim(rng, 1, 6);
                let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
                let w = randn(rng, &[k, c]);
                Instance {
                    inputs: vec![randn(rng, &[r, c])],
                    f: Box::new(move |t, v| {
                        let y = t.gather_rows(v[0], &rows)?;
                        project(t, y, &w)
                    }),
                }
            },
        },
        GradCase {
            name: "dot",
            make: |rng| {
                let n = dim(rng, 1, 6);
                Instance {
                    inputs: vec![randn(rng, &[n]), randn(rng, &[n])],
                    f: Box::new(|t, v| {
                        let d = t.dot(v[0], v[1])?;
                        t.mul(d, d)
                    }),
                }
            },
        },
        GradCase {
            name: "mse",
            make: |rng| {
                let shape = [dim(rng, 1, 3), dim(rng, 1, 4)];
                Instance {
                    inputs: vec![randn(rng, &shape), randn(rng, &shape)],
                    f: Box::new(|t, v| t.mse(v[0], v[1])),
                }
            },
        },
        GradCase {
            name: "conv2d",
            make: |rng| {
                let (b, c, f) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
                let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
                let stride = dim(rng, 1, 2);
                let pad = dim(rng, 0, 1);
                let oh = (h + 2 * pad - 3) / stride + 1;
                let ow = (w + 2 * pad - 3) / stride + 1;
                let wt = randn(rng, &[b, f, oh, ow]);
                Instance {
                    inputs: vec![
                        randn(rng, &[b, c, h, w]),
                        randn(rng, &[f, c, 3, 3]),
                        randn(rng, &[f]),
                    ],
                    f: Box::new(move |t, v| {
                        let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                        project(t, y, &wt)
                    }),
                }
            },
        },
        GradCase {
            name: "cross_entropy",
            make: |rng| {
                let (b, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
                let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
                Instance {
                    inputs: vec![randn(rng, &[b, c])],
                    f: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
                }
            },
        },
        GradCase {
            name: "chain",
            make: |rng| {
                // f(g(x)) through several stages at once.
                let (r, c) = (dim(rng, 2, 3), dim(rng, 3, 4));
                let w = randn(rng, &[r, c]);
                Instance {
                    inputs: vec![randn(rng, &[r, c]), randn(rng, &[c, c])],
                    f: Box::new(move |t, v| {
                        let a = t.matmul(v[0], v[1])?;
                        let b = t.gelu(a);
                        let n = t.layer_norm(b);
                        let s = t.softmax(n);
                        let l = t.l2_normalize(s);
                        project(t, l, &w)
                    }),
                }
            },
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_has_a_case() {
        let names: Vec<&str> = op_cases().iter().map(|c| c.name).collect();
        for k in OpKind::ALL {
            assert!(names.contains(&k.name()), "no gradcheck case for {}", k.name());
        }
    }

    #[test]
    fn op_suite_passes() {
        let report = run_suite(&op_cases(), 10, 42, None).unwrap();
        for c in &report.cases {
            assert!(c.passed, "{} rel err {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn sign_flip_is_detected_by_name() {
        let report = run_suite(&op_cases(), 3, 1, Some(OpKind::MatMul)).unwrap();
        let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
        assert!(failed.contains(&"matmul"));
        assert!(failed.contains(&"chain"));
        assert!(!failed.contains(&"relu"));
    }

    #[test]
    fn empty_registry_is_error() {
        assert!(matches!(run_suite(&[], 1, 0, None), Err(Error::Contract(_))));
    }
}
