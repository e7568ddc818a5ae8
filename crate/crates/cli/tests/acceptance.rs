//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use fedctl_cli::commands::{cmd_compare, cmd_run, ConfigArgs};
use fedctl_core::control::{self, ControlConfig, ControlState, WeightSource};
use fedctl_core::datagen::{self, noniid_score, DataGenConfig};
use fedctl_core::fed::{aggregate_parameters, ClientUpdate};
use fedctl_core::math::finite_diff_grad;
use fedctl_core::model::{evaluate, loss_and_grad, Activation, Example, ModelSpec, ParamVector};
use fedctl_core::orchestrator::{run_comparison, run_simulation_with, RoundObserver, RunOptions};
use fedctl_core::{model, run_simulation, SeededRng, SimulationConfig};
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

/// Config named by criteria 3, 5 and 6: 10 clients, Dirichlet beta 0.5, logreg,
/// 10 rounds, eta0 0.05.
fn desk_config() -> SimulationConfig {
    let cfg = SimulationConfig::default();
    assert_eq!(cfg.data.num_clients, 10);
    assert_eq!(cfg.data.dirichlet_beta, 0.5);
    assert_eq!(cfg.model.kind, fedctl_core::ModelKind::Logreg);
    assert_eq!(cfg.rounds, 10);
    assert_eq!(cfg.control.eta0, 0.05);
    cfg
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn random_params(spec: &ModelSpec, rng: &mut SeededRng) -> ParamVector {
    ParamVector::new(spec, (0..spec.param_count()).map(|_| rng.standard_normal()).collect()).unwrap()
}

fn ac1_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(1001);
    let mut worst: f64 = 0.0;
    let kinds = [
        ModelSpec::logreg(5, 3),
        ModelSpec::mlp1(5, 6, 3, Activation::Tanh),
        ModelSpec::mlp1(5, 6, 3, Activation::Relu),
    ];
    for spec in kinds {
        for _ in 0..100 {
            let theta = random_params(&spec, &mut rng);
            let batch: Vec<Example> = (0..8)
                .map(|_| Example::new((0..5).map(|_| rng.standard_normal()).collect(), rng.below(3)))
                .collect();
            let (_, g) = loss_and_grad(&spec, &theta, &batch).unwrap();
            let fd = finite_diff_grad(
                |v| {
                    evaluate(&spec, &ParamVector::new(&spec, v.to_vec()).unwrap(), &batch)
                        .unwrap()
                        .loss
                },
                theta.values(),
                1e-5,
            )
            .unwrap();
            let gmax = g.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = g
                .values()
                .iter()
                .zip(&fd)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(err / (1.0 + gmax));
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst < 1e-4, "worst relative error {worst:.3e} >= 1e-4");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("300 instances, worst rel err {worst:.2e}, {elapsed:.2?}"))
}

fn ac2_aggregation() -> Outcome {
    let mut rng = SeededRng::new(2002);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let clients = 1 + rng.below(5);
        let classes = 2;
        let input_dim = 1 + rng.below(9); // (input_dim + 1) * 2 <= 20 parameters
        let spec = ModelSpec::logreg(input_dim, classes);
        let params: Vec<Vec<f64>> = (0..clients)
            .map(|_| (0..spec.param_count()).map(|_| 10.0 * rng.standard_normal()).collect())
            .collect();
        let mut weights: Vec<f64> = (0..clients).map(|_| rng.next_f64()).collect();
        weights[0] += 1e-3;
        let updates: Vec<ClientUpdate> = params
            .iter()
            .enumerate()
            .map(|(i, v)| ClientUpdate {
                client_id: i,
                params: ParamVector::new(&spec, v.clone()).unwrap(),
                train_loss_before: 0.0,
                train_loss_after: 0.0,
                grad_norm: 0.0,
                num_examples: 1,
            })
            .collect();
        let out = aggregate_parameters(&updates, &weights).unwrap();
        let total: f64 = weights.iter().sum();
        for j in 0..spec.param_count() {
            let mut naive = 0.0;
            for i in 0..clients {
                naive += weights[i] * params[i][j];
            }
            naive /= total;
            worst = worst.max((out.values()[j] - naive).abs());
            let lo = params.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
            let hi = params.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
            ensure!(
                out.values()[j] >= lo && out.values()[j] <= hi,
                "coordinate {j} outside [{lo}, {hi}]"
            );
        }
        // Scale invariance, bit-exact, for scalings that are exact in f64.
        let c = 2f64.powi(rng.below(41) as i32 - 20);
        let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
        ensure!(
            aggregate_parameters(&updates, &scaled).unwrap() == out,
            "power-of-two scaling by {c} changed output"
        );
        let ints: Vec<f64> = (0..clients).map(|_| (1 + rng.below(1000)) as f64).collect();
        let k = (1 + rng.below(1000)) as f64;
        let kints: Vec<f64> = ints.iter().map(|w| w * k).collect();
        ensure!(
            aggregate_parameters(&updates, &ints).unwrap() == aggregate_parameters(&updates, &kints).unwrap(),
            "integer scaling by {k} changed output"
        );
    }
    ensure!(worst < 1e-12, "max deviation from naive mean {worst:.3e}");
    Ok(format!(
        "50 instances, max deviation {worst:.2e}, scale-invariant, within bounds"
    ))
}

fn ac3_control_law() -> Outcome {
    let mut rng = SeededRng::new(3003);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 1000 {
        let eta = 1e-3 + rng.next_f64() * 0.5;
        let gamma = rng.next_f64() * 20.0;
        let dl = (rng.next_f64() - 0.5) * 0.4;
        let cfg = ControlConfig {
            gamma,
            eta0: eta,
            eta_min: 1e-4,
            eta_max: 1.0,
            ..ControlConfig::default()
        };
        let state = ControlState::new(&cfg, vec![1.0]);
        let next = control::update_learning_rate(&state, &cfg, dl);
        ensure!(next >= cfg.eta_min && next <= cfg.eta_max, "clamp violated: {next}");
        ensure!(
            control::update_learning_rate(&state, &cfg, 0.0).to_bits() == eta.to_bits(),
            "dL = 0 moved eta"
        );
        if next == cfg.eta_min || next == cfg.eta_max {
            continue;
        }
        worst = worst.max((next / eta - (-gamma * dl).exp()).abs());
        checked += 1;
    }
    ensure!(worst < 1e-12, "closed-form deviation {worst:.3e}");

    for _ in 0..1000 {
        let cfg = ControlConfig {
            gamma: rng.next_f64() * 100.0,
            eta0: 1e-4 + rng.next_f64() * 0.9,
            ..ControlConfig::default()
        };
        let state = ControlState::new(&cfg, vec![1.0]);
        let next = control::update_learning_rate(&state, &cfg, (rng.next_f64() - 0.5) * 200.0);
        ensure!(next >= cfg.eta_min && next <= cfg.eta_max, "clamp violated: {next}");
    }

    let cfg = desk_config();
    let res = run_simulation(&cfg).map_err(|e| e.to_string())?;
    let eta = res.eta_trajectory();
    for r in 0..eta.len() - 1 {
        ensure!(
            eta[r + 1] <= eta[r],
            "eta rose after round {}: {} -> {}",
            r + 1,
            eta[r],
            eta[r + 1]
        );
        if res.rounds[r].delta_loss > 0.0 && eta[r] > cfg.control.eta_min {
            ensure!(eta[r + 1] < eta[r], "eta flat after improving round {}", r + 1);
        }
    }
    let shown: Vec<String> = eta.iter().map(|e| format!("{e:.4}")).collect();
    Ok(format!(
        "1000 unclamped cases, dev {worst:.1e}; eta {}",
        shown.join(" ")
    ))
}

fn ac4_weights() -> Outcome {
    let levels = [-1.0, 0.0, 0.5, 2.0];
    let mut cases = 0;
    let mut fallbacks = 0;
    for n in 1..=4usize {
        for code in 0..levels.len().pow(n as u32) {
            let f: Vec<f64> = (0..n)
                .map(|i| levels[(code / levels.len().pow(i as u32)) % levels.len()])
                .collect();
            let sizes: Vec<usize> = (0..n).map(|i| 10 * (i + 1)).collect();
            for source in [
                WeightSource::LossReduction,
                WeightSource::GradNorm,
                WeightSource::DataSizeStatic,
            ] {
                for floor in [0.0, 0.25] {
                    let cfg = ControlConfig {
                        weight_source: source,
                        weight_floor: floor,
                        ..ControlConfig::default()
                    };
                    let make = |scale: f64| -> Vec<ClientUpdate> {
                        f.iter()
                            .zip(&sizes)
                            .enumerate()
                            .map(|(i, (v, n))| ClientUpdate {
                                client_id: i,
                                params: ParamVector::zeros(&ModelSpec::logreg(1, 2)),
                                train_loss_before: v * scale,
                                train_loss_after: 0.0,
                                grad_norm: v * scale,
                                num_examples: *n,
                            })
                            .collect()
                    };
                    let w = control::update_client_weights(&cfg, &make(1.0));
                    ensure!(w.iter().all(|x| *x >= 0.0), "negative weight {w:?}");
                    ensure!(
                        (w.iter().sum::<f64>() - 1.0).abs() < 1e-12,
                        "weights sum {}",
                        w.iter().sum::<f64>()
                    );
                    if floor == 0.0 && source != WeightSource::DataSizeStatic {
                        for c in [0.125, 4.0, 1024.0] {
                            ensure!(
                                control::update_client_weights(&cfg, &make(c)) == w,
                                "not scale-equivariant: {f:?} x {c}"
                            );
                        }
                        if f.iter().all(|v| *v <= 0.0) {
                            ensure!(
                                w == control::data_size_weights(&sizes),
                                "no data-size fallback for {f:?}"
                            );
                            fallbacks += 1;
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} constructed cases, {fallbacks} fallback cases"))
}

fn ac5_table1() -> Outcome {
    let start = Instant::now();
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let report = cmd_compare(&ConfigArgs::default(), &SEEDS, dir.path()).map_err(|e| e.to_string())?;
    let _ = desk_config();
    let elapsed = start.elapsed();
    let off = report.arm(false, false).unwrap();
    let on = report.arm(true, false).unwrap();
    let (acc_off, acc_on) = (off.mean_final_accuracy, on.mean_final_accuracy);
    let (loss_off, loss_on) = (off.mean_final_loss, on.mean_final_loss);
    let detail = format!(
        "control off acc {:.2}% loss {loss_off:.4}; on acc {:.2}% loss {loss_on:.4}; {elapsed:.2?}",
        100.0 * acc_off,
        100.0 * acc_on
    );
    ensure!(acc_on >= acc_off - 0.005, "accuracy dropped: {detail}");
    ensure!(loss_on <= loss_off * 1.05, "loss rose more than 5%: {detail}");
    ensure!(elapsed < Duration::from_secs(120), "too slow: {detail}");
    Ok(detail)
}

fn ac6_table3() -> Outcome {
    let mut details = Vec::new();
    for (beta, strict) in [(0.5, false), (0.1, true)] {
        let mut cfg = desk_config();
        cfg.data.dirichlet_beta = beta;
        let cmp = run_comparison(&cfg, &SEEDS).map_err(|e| e.to_string())?;
        for run in &cmp.runs {
            for round in &run.result.rounds {
                for c in &round.clients {
                    ensure!(
                        c.personalize_loss_after <= c.personalize_loss_before,
                        "beta {beta} seed {} round {} client {}: train loss rose",
                        run.seed,
                        round.round,
                        c.client_id
                    );
                }
            }
        }
        for control in [false, true] {
            let gain = cmp.report.arm(control, true).unwrap().mean_personalization_gain;
            if strict {
                ensure!(gain > 0.0, "beta {beta} control {control}: gain {gain} not > 0");
            } else {
                ensure!(gain >= 0.0, "beta {beta} control {control}: gain {gain} < 0");
            }
            details.push(format!(
                "beta {beta} control {}: {:+.2} pts",
                if control { "on" } else { "off" },
                100.0 * gain
            ));
        }
    }
    Ok(details.join("; "))
}

struct Starts {
    starts: Mutex<Vec<(usize, usize, ParamVector)>>,
    globals: Mutex<Vec<(usize, ParamVector, ParamVector, usize)>>,
}

impl RoundObserver for Starts {
    fn on_local_start(&self, round: usize, client_id: usize, start: &ParamVector) {
        self.starts.lock().unwrap().push((round, client_id, start.clone()));
    }

    fn on_aggregate(&self, round: usize, previous: &ParamVector, updates: &[ClientUpdate], next: &ParamVector) {
        self.globals
            .lock()
            .unwrap()
            .push((round, previous.clone(), next.clone(), updates.len()));
    }
}

fn ac7_determinism() -> Outcome {
    let a = TempDir::new().map_err(|e| e.to_string())?;
    let b = TempDir::new().map_err(|e| e.to_string())?;
    cmd_run(&ConfigArgs::default(), a.path()).map_err(|e| e.to_string())?;
    cmd_run(&ConfigArgs::default(), b.path()).map_err(|e| e.to_string())?;
    for f in ["rounds.csv", "clients.csv"] {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{f} differs between identical runs");
    }
    let cfg = desk_config();
    let none = Starts {
        starts: Mutex::new(Vec::new()),
        globals: Mutex::new(Vec::new()),
    };
    let par = run_simulation_with(&cfg, RunOptions { parallel: true }, &none).map_err(|e| e.to_string())?;
    let seq = run_simulation_with(&cfg, RunOptions { parallel: false }, &none).map_err(|e| e.to_string())?;
    ensure!(par == seq, "parallel and sequential fan-out differ");
    Ok("byte-identical CSVs; parallel == sequential".into())
}

fn ac8_fidelity() -> Outcome {
    let cfg = desk_config().resolved();
    let obs = Starts {
        starts: Mutex::new(Vec::new()),
        globals: Mutex::new(Vec::new()),
    };
    let res = run_simulation_with(&cfg, RunOptions::default(), &obs).map_err(|e| e.to_string())?;
    let starts = obs.starts.into_inner().unwrap();
    let globals = obs.globals.into_inner().unwrap();
    let n = cfg.data.num_clients;

    let init = model::init_params(&cfg.model, &mut SeededRng::new(cfg.master_seed).derive("init", 0)).unwrap();
    let mut expected = init;
    ensure!(globals.len() == cfg.rounds, "saw {} aggregations", globals.len());
    for (round, previous, next, count) in &globals {
        ensure!(
            *previous == expected,
            "round {round} did not start from the previous global model"
        );
        ensure!(*count == n, "round {round} aggregated {count} updates");
        let mut ids: Vec<usize> = Vec::new();
        for (r, id, start) in starts.iter().filter(|s| s.0 == *round) {
            ensure!(*start == expected, "round {r} client {id} started elsewhere");
            ids.push(*id);
        }
        ids.sort_unstable();
        ensure!(ids == (0..n).collect::<Vec<_>>(), "round {round} participation {ids:?}");
        expected = next.clone();
    }
    ensure!(expected == res.final_global, "final global differs from last aggregate");
    ensure!(res.rounds.iter().all(|r| r.clients.len() == n), "missing client rows");
    Ok(format!(
        "{} rounds x {n} clients start from the broadcast model",
        cfg.rounds
    ))
}

fn ac9_noniid() -> Outcome {
    let betas = [0.1, 1.0, 10.0, 1e6];
    let mut scores = Vec::new();
    for beta in betas {
        let mut total = 0.0;
        for seed in SEEDS {
            let cfg = DataGenConfig {
                dirichlet_beta: beta,
                seed,
                ..DataGenConfig::default()
            };
            total += noniid_score(&datagen::generate(&cfg).map_err(|e| e.to_string())?);
        }
        scores.push(total / SEEDS.len() as f64);
    }
    ensure!(scores.windows(2).all(|w| w[0] > w[1]), "not decreasing: {scores:?}");
    let shown: Vec<String> = betas.iter().zip(&scores).map(|(b, s)| format!("{b}:{s:.3}")).collect();
    Ok(shown.join(" "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1 gradient correctness", ac1_gradients),
        ("AC2 aggregation oracle", ac2_aggregation),
        ("AC3 control law + eta trajectory", ac3_control_law),
        ("AC4 weight distribution", ac4_weights),
        ("AC5 control does not hurt (10 rounds)", ac5_table1),
        ("AC6 personalization gain", ac6_table3),
        ("AC7 determinism", ac7_determinism),
        ("AC8 round fidelity", ac8_fidelity),
        ("AC9 non-IID knob", ac9_noniid),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
