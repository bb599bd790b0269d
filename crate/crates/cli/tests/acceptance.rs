use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use uamflow::autodiff::ParamStore;
use uamflow::cnf::FlowStack;
use uamflow::controller::{
    select_rate, IntruderPrediction, LaneGeometry, RateSet, SeparationStandard, UamState, MAX_ACCELERATION,
    MAX_DECELERATION, PLAN_HORIZON, STOP_SHORT_MARGIN_M, V_MAX,
};
use uamflow::evalkit::{evaluate, min_ade, min_fde};
use uamflow::geo::{units, EnuPoint, LocalFrame};
use uamflow::model::{ModelDims, ModelKind, TrajectoryModel};
use uamflow::predictor::{PredictionSet, TruthInSamples};
use uamflow::sim::{
    build_traffic, cdf_dominates, empirical_quantile, encounter_pairs, run, run_all, truth_tracks, EncounterCriteria,
    ScenarioConfig, ScriptedIntruder, SimMode, Snapshot, TrafficSource, TrafficTrack,
};
use uamflow::synthetic::{generate, SyntheticConfig, SyntheticTask, GIMPO};
use uamflow::train::{batch_loss, compute_gradients, fit, TrainConfig};
use uamflow::trajdata::{prepare_dataset, Example, InputConfig, WindowSpec};

const EARTH_RADIUS_M: f64 = 6_371_000.0;
const LOS_HORIZONTAL_M: f64 = 762.0;
const LOS_VERTICAL_M: f64 = 304.8;

fn verdict(name: &str, ok: bool, detail: String) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn haversine(frame: &LocalFrame, a: &EnuPoint, b: &EnuPoint) -> f64 {
    let (p, q) = (frame.from_enu(a), frame.from_enu(b));
    let (lat1, lat2) = (p.lat.to_radians(), q.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (q.lon - p.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

fn scaled_flow(dim: usize, cond: usize, layers: usize, gain: f64, seed: u64) -> (ParamStore, FlowStack) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow = FlowStack::init(&mut store, dim, cond, layers, 16, Some(3.0), &mut rng);
    for t in store.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v *= gain);
    }
    (store, flow)
}

#[test]
fn flow_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_round_trip = 0.0f64;
    let flows: Vec<_> = (1..=8).map(|d| (d, scaled_flow(d, 3, 4, 8.0, d as u64))).collect();
    for i in 0..1000 {
        let (d, (store, flow)) = &flows[i % flows.len()];
        let x: Vec<f64> = (0..*d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (y, _) = flow.forward(store, &x, &h).unwrap();
        let (back, _) = flow.inverse(store, &y, &h).unwrap();
        for (a, b) in back.iter().zip(&x) {
            worst_round_trip = worst_round_trip.max((a - b).abs());
        }
    }

    let mut worst_logdet = 0.0f64;
    for (d, (store, flow)) in &flows {
        for _ in 0..10 {
            let x: Vec<f64> = (0..*d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, logdet) = flow.forward(store, &x, &h).unwrap();
            let step = 1e-5;
            let jac = DMatrix::from_fn(*d, *d, |r, c| {
                let mut plus = x.clone();
                plus[c] += step;
                let mut minus = x.clone();
                minus[c] -= step;
                let yp = flow.forward(store, &plus, &h).unwrap().0;
                let ym = flow.forward(store, &minus, &h).unwrap().0;
                (yp[r] - ym[r]) / (2.0 * step)
            });
            let numeric = jac.determinant().abs();
            worst_logdet = worst_logdet.max((numeric / logdet.exp() - 1.0).abs());
        }
    }

    let (store, flow) = scaled_flow(1, 2, 4, 4.0, 7);
    let h = [0.3, -0.8];
    let (lo, hi, n) = (-80.0, 80.0, 320_000);
    let dx = (hi - lo) / n as f64;
    let density = |y: f64| flow.log_density(&store, &[y], &h).unwrap().exp();
    let mass: f64 = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * density(lo + dx * i as f64)
        })
        .sum::<f64>()
        * dx;

    let ok = worst_round_trip <= 1e-9 && worst_logdet <= 1e-5 && (mass - 1.0).abs() <= 1e-3;
    verdict(
        "flow correctness",
        ok,
        format!("round trip {worst_round_trip:.2e}, determinant rel err {worst_logdet:.2e}, 1-D mass {mass:.6}"),
    );
    assert!(ok);
}

fn tiny_examples(seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|_| Example {
            features: (0..5)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            target: (0..9).map(|_| rng.random_range(-1.5..1.5)).collect(),
            anchor: EnuPoint::ORIGIN,
            future: Vec::new(),
        })
        .collect()
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        history: 5,
        horizon: 3,
        input: InputConfig::AbsDev,
        hidden: 8,
        flow_layers: 2,
        flow_width: 8,
        mlp_width: 8,
        scale_clamp: Some(3.0),
    }
}

#[test]
fn gradient_correctness() {
    let batch = tiny_examples(5);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for kind in ModelKind::ALL {
        let m = TrajectoryModel::new(kind, tiny_dims(), 11).unwrap();
        let (_, grads) = compute_gradients(&m, &batch).unwrap();
        let step = 1e-3;
        for (ti, t) in m.params.tensors().iter().enumerate() {
            let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
            let mut elementwise = 0.0f64;
            for i in 0..t.data.len() {
                let mut plus = m.clone();
                plus.params.tensors_mut()[ti].data[i] += step;
                let mut minus = m.clone();
                minus.params.tensors_mut()[ti].data[i] -= step;
                let numeric = (batch_loss(&plus, &batch).unwrap() - batch_loss(&minus, &batch).unwrap()) / (2.0 * step);
                let analytic = grads.tensors[ti].data[i];
                elementwise = elementwise.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
                diff += (analytic - numeric).powi(2);
                an += analytic * analytic;
                nn += numeric * numeric;
            }
            let tensor = diff.sqrt() / an.sqrt().max(nn.sqrt()).max(f64::MIN_POSITIVE);
            worst.insert(format!("{kind}/{}", m.params.names()[ti]), elementwise.max(tensor));
        }
    }
    let (name, rel) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let ok = *rel <= 1e-4;
    verdict(
        "gradient correctness",
        ok,
        format!("{} tensors, worst rel err {rel:.2e} ({name})", worst.len()),
    );
    assert!(ok);
}

#[test]
fn learning_sanity() {
    let (h, t) = (20, 20);
    let trajs = generate(&SyntheticConfig::new(SyntheticTask::BimodalTurn, 500, h, t, 42)).unwrap();
    let data = prepare_dataset(
        trajs,
        WindowSpec { history: h, horizon: t },
        InputConfig::AbsDev,
        GIMPO,
        7,
    )
    .unwrap();
    let dims = ModelDims {
        history: h,
        horizon: t,
        input: InputConfig::AbsDev,
        hidden: 16,
        flow_layers: 4,
        flow_width: 32,
        mlp_width: 32,
        scale_clamp: Some(3.0),
    };
    let mut ade = std::collections::HashMap::new();
    let mut nll_drop = None;
    for kind in ModelKind::ALL {
        let cfg = TrainConfig {
            batch_size: 32,
            learning_rate: 1e-2,
            epochs: 60,
            seed: 3,
            ..TrainConfig::for_kind(kind)
        };
        let report = fit(
            TrajectoryModel::new(kind, dims, 1).unwrap(),
            &data.train,
            &data.val,
            &cfg,
        )
        .unwrap();
        let k = if kind == ModelKind::Flow { 100 } else { 1 };
        let row = evaluate(&report.model, &data.stats, &data.test, k, 9).unwrap();
        if kind == ModelKind::Flow {
            nll_drop = Some((
                report.val_history[0],
                report.val_history[report.best_epoch],
                report.best_epoch,
            ));
        }
        ade.insert(kind, row.min_ade_m);
    }
    let (first, best, epoch) = nll_drop.unwrap();
    let flow = ade[&ModelKind::Flow];
    let ok = best < first && epoch > 0 && flow < ade[&ModelKind::GruDecoder] && flow < ade[&ModelKind::MlpDecoder];
    verdict(
        "learning sanity",
        ok,
        format!(
            "flow val NLL {first:.3} -> {best:.3} (epoch {epoch}); minADE flow {flow:.1} m, gru {:.1} m, mlp {:.1} m",
            ade[&ModelKind::GruDecoder],
            ade[&ModelKind::MlpDecoder]
        ),
    );
    assert!(ok);
}

struct Crossing {
    cfg: ScenarioConfig,
    altitude_ft: f64,
    lane: LaneGeometry,
    frame: LocalFrame,
    traffic: Vec<TrafficTrack>,
}

/// One intruder crossing the lane so that it meets a chosen UAM departure at
/// the crossing point.
fn crossing_scenario(seed: u64) -> Crossing {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ScenarioConfig::reference();
    let altitude_ft = [1500.0, 2000.0, 2500.0, 3000.0][rng.random_range(0..4)];
    cfg.altitudes_ft = vec![altitude_ft];
    cfg.prediction.stub_spread_m = 200.0;
    let frame = cfg.frame().unwrap();
    let lane = cfg.lanes[0].geometry(&frame, units::feet(altitude_ft)).unwrap();
    let departure = rng.random_range(3..8) as f64;
    let s_c = rng.random_range(5000.0..9000.0);
    let t_c = (10.0 * departure + s_c / V_MAX).round() as i64;
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let theta = sign * rng.random_range(45.0f64..135.0).to_radians();
    let speed = rng.random_range(60.0..90.0);
    let (c, s) = (theta.cos(), theta.sin());
    let dir = [
        lane.direction[0] * c - lane.direction[1] * s,
        lane.direction[0] * s + lane.direction[1] * c,
    ];
    let cross = lane.point_at(s_c);
    let lead = 200;
    let dz = rng.random_range(-120.0..120.0);
    cfg.traffic = TrafficSource::Scripted {
        intruders: vec![ScriptedIntruder {
            start_tick: t_c - lead,
            start: EnuPoint::new(
                cross.east - dir[0] * speed * lead as f64,
                cross.north - dir[1] * speed * lead as f64,
                cross.up + dz,
            ),
            velocity: EnuPoint::new(dir[0] * speed, dir[1] * speed, 0.0),
            duration_s: 400,
        }],
    };
    cfg.duration_s = (t_c + 200) as u64;
    let traffic = build_traffic(&cfg, None).unwrap();
    Crossing {
        cfg,
        altitude_ft,
        lane,
        frame,
        traffic,
    }
}

/// Distance flown in `t` seconds from speed `v` under constant rate `a`,
/// with the speed held inside `[0, V_MAX]`.
fn flown(v: f64, a: f64, t: f64) -> f64 {
    let mut cuts = vec![0.0, t];
    if a != 0.0 {
        for limit in [0.0, V_MAX] {
            let s = (limit - v) / a;
            if s > 0.0 && s < t {
                cuts.push(s);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2)
        .map(|w| {
            let speed = |s: f64| (v + a * s).clamp(0.0, V_MAX);
            0.5 * (speed(w[0]) + speed(w[1])) * (w[1] - w[0])
        })
        .sum()
}

/// Every UAM on a cruise schedule that meets the intruder inside the loss of
/// separation volume, and whether each of those can still avoid it from the
/// moment the intruder becomes predictable by cruising or braking fully.
fn conflict_oracle(x: &Crossing, history: usize) -> (usize, bool) {
    let track = &x.traffic[0];
    let encounter = EncounterCriteria::default();
    let mut conflicts = 0;
    let mut feasible = true;
    let interval = x.cfg.uam_interval_s as i64;
    for spawn in (0..x.cfg.duration_s as i64).step_by(interval as usize) {
        let flight_s = (x.lane.length_m / V_MAX).ceil() as i64;
        let cruise = |t: i64| x.lane.point_at(V_MAX * (t - spawn) as f64);
        let conflict = (spawn..=spawn + flight_s).any(|t| {
            track.at(t).is_some_and(|p| {
                let q = cruise(t);
                V_MAX * ((t - spawn) as f64) <= x.lane.length_m
                    && haversine(&x.frame, &q, &p) <= LOS_HORIZONTAL_M
                    && (q.up - p.up).abs() <= LOS_VERTICAL_M
            })
        });
        if !conflict {
            continue;
        }
        conflicts += 1;
        let onset = (spawn..spawn + flight_s).find(|&t| {
            track.at(t).is_some_and(|p| {
                let q = cruise(t);
                t - track.start >= history as i64 - 1
                    && encounter.contains(haversine(&x.frame, &q, &p), (q.up - p.up).abs())
            })
        });
        let Some(t0) = onset else {
            feasible = false;
            continue;
        };
        let s0 = V_MAX * (t0 - spawn) as f64;
        let clears = |a: f64| {
            (t0..track.end()).all(|t| {
                let s = s0 + flown(V_MAX, a, (t - t0) as f64);
                s > x.lane.length_m
                    || haversine(&x.frame, &x.lane.point_at(s), &track.at(t).unwrap()) > LOS_HORIZONTAL_M
            })
        };
        if !clears(0.0) && !clears(MAX_DECELERATION) {
            feasible = false;
        }
    }
    (conflicts, feasible)
}

#[test]
fn controller_safety_oracle() {
    let mut used = 0;
    let mut failures = Vec::new();
    let mut seed = 0;
    while used < 50 && seed < 1000 {
        let x = crossing_scenario(seed);
        seed += 1;
        let (conflicts, feasible) = conflict_oracle(&x, x.cfg.prediction.history);
        if conflicts == 0 || !feasible {
            continue;
        }
        used += 1;
        let p = &x.cfg.prediction;
        let mut stub = TruthInSamples::new(truth_tracks(&x.traffic), p.samples, p.history, p.horizon);
        stub.spread_m = p.stub_spread_m;
        stub.vertical_spread_m = p.stub_vertical_spread_m;
        let base = run(&x.cfg, 0, x.altitude_ft, SimMode::Baseline, &x.traffic, None, seed).unwrap();
        let adj = run(
            &x.cfg,
            0,
            x.altitude_ft,
            SimMode::Adjusted,
            &x.traffic,
            Some(&stub),
            seed,
        )
        .unwrap();
        if base.los_events == 0 || adj.los_events > 0 {
            failures.push((seed - 1, base.los_events, adj.los_events));
        }
    }
    let ok = used == 50 && failures.is_empty();
    verdict(
        "controller safety oracle",
        ok,
        format!("{used} feasible conflicting scenarios from {seed} draws, failures (seed, baseline LoS, adjusted LoS) {failures:?}"),
    );
    assert!(ok);
}

#[test]
fn cdf_dominance() {
    let mut cfg = ScenarioConfig::reference();
    cfg.duration_s = 6 * 3600;
    cfg.prediction.predictor = uamflow::sim::PredictorKind::TruthInSamples;
    let traffic = build_traffic(&cfg, None).unwrap();
    let p = &cfg.prediction;
    let mut stub = TruthInSamples::new(truth_tracks(&traffic), p.samples, p.history, p.horizon);
    stub.spread_m = p.stub_spread_m;
    stub.vertical_spread_m = p.stub_vertical_spread_m;
    let base = run_all(&cfg, SimMode::Baseline, &traffic, None, 1).unwrap();
    let adj = run_all(&cfg, SimMode::Adjusted, &traffic, Some(&stub), 1).unwrap();
    let probs: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let mut lines = Vec::new();
    let mut ok = true;
    for (b, a) in base.iter().zip(&adj) {
        let sb: Vec<Option<f64>> = b.flights.iter().map(|f| f.min_separation_m).collect();
        let sa: Vec<Option<f64>> = a.flights.iter().map(|f| f.min_separation_m).collect();
        let dominates = cdf_dominates(&sa, &sb, &probs);
        let independent = probs
            .iter()
            .all(|&q| empirical_quantile(&sa, q) >= empirical_quantile(&sb, q));
        ok &= dominates && independent && b.los_events > 0;
        lines.push(format!(
            "{} ft median {:.0} -> {:.0} m, LoS {} -> {}",
            b.altitude_ft,
            empirical_quantile(&sb, 0.5),
            empirical_quantile(&sa, 0.5),
            b.los_events,
            a.los_events
        ));
    }
    verdict("cdf dominance", ok, lines.join("; "));
    assert!(ok);
}

struct Snap {
    state: UamState,
    intruders: Vec<Option<PredictionSet>>,
}

fn random_snapshot(rng: &mut ChaCha8Rng, rates: &RateSet) -> Snap {
    let lane = LaneGeometry::new(EnuPoint::new(0.0, 0.0, 0.0), EnuPoint::new(0.0, 14_000.0, 0.0), 600.0);
    let rate = if rng.random_bool(0.6) {
        rates.rates[rng.random_range(0..rates.rates.len())]
    } else {
        rng.random_range(MAX_DECELERATION..=MAX_ACCELERATION)
    };
    let state = UamState {
        lane,
        along: rng.random_range(0.0..13_500.0),
        speed: if rng.random_bool(0.2) {
            V_MAX
        } else {
            rng.random_range(0.0..=V_MAX)
        },
        rate,
    };
    let n = rng.random_range(1..=3);
    let intruders = (0..n)
        .map(|j| {
            if rng.random_bool(0.04) {
                return None;
            }
            let k = rng.random_range(1..=20);
            let meet = state.along + rng.random_range(0.0..3000.0);
            let centre = lane.point_at(meet);
            let paths: Vec<Vec<EnuPoint>> = (0..k)
                .map(|_| {
                    let heading = rng.random_range(0.0..std::f64::consts::TAU);
                    let speed = rng.random_range(40.0..100.0);
                    let t_meet = rng.random_range(5.0..55.0);
                    let offset = rng.random_range(-1500.0..1500.0);
                    let up = 600.0 + rng.random_range(-450.0..450.0);
                    (1..=PLAN_HORIZON)
                        .map(|tau| {
                            let dt = tau as f64 - t_meet;
                            EnuPoint::new(
                                centre.east + offset + speed * heading.sin() * dt,
                                centre.north + speed * heading.cos() * dt,
                                up,
                            )
                        })
                        .collect()
                })
                .collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            Some(PredictionSet {
                aircraft_id: format!("I{j}"),
                issued_at: 0,
                paths,
                weights: raw.iter().map(|w| w / total).collect(),
                clamped_samples: 0,
            })
        })
        .collect();
    Snap { state, intruders }
}

/// Planned positions along the lane, stopping at the lane end.
fn planned(state: &UamState, a: f64) -> Vec<EnuPoint> {
    (1..=PLAN_HORIZON)
        .map(|tau| state.along + flown(state.speed, a, tau as f64))
        .take_while(|&s| s <= state.lane.length_m)
        .map(|s| state.lane.point_at(s))
        .collect()
}

/// Per intruder and sample, the first step that violates separation.
fn first_hits(frame: &LocalFrame, plan: &[EnuPoint], preds: &[&PredictionSet]) -> Vec<Vec<Option<usize>>> {
    preds
        .iter()
        .map(|p| {
            p.paths
                .iter()
                .map(|path| {
                    plan.iter().zip(path).position(|(u, q)| {
                        (u.up - q.up).abs() <= LOS_VERTICAL_M && haversine(frame, u, q) <= LOS_HORIZONTAL_M
                    })
                })
                .collect()
        })
        .collect()
}

fn risk(frame: &LocalFrame, state: &UamState, a: f64, preds: &[&PredictionSet]) -> f64 {
    let plan = planned(state, a);
    first_hits(frame, &plan, preds)
        .iter()
        .zip(preds)
        .map(|(hits, p)| {
            let sum: f64 = hits
                .iter()
                .zip(&p.weights)
                .filter(|(h, _)| h.is_some())
                .map(|(_, w)| w)
                .sum();
            sum.clamp(0.0, 1.0)
        })
        .fold(0.0, f64::max)
}

fn brute_force_rate(frame: &LocalFrame, snap: &Snap, rates: &RateSet) -> f64 {
    if snap.intruders.iter().any(Option::is_none) {
        return MAX_DECELERATION;
    }
    let preds: Vec<&PredictionSet> = snap.intruders.iter().flatten().collect();
    let s = &snap.state;
    let current = risk(frame, s, s.rate, &preds);
    if current == 0.0 && s.rate > 0.0 {
        return s.rate;
    }
    let mut candidates = rates.rates.clone();
    let hits = first_hits(frame, &planned(s, s.rate), &preds);
    let earliest = hits
        .iter()
        .enumerate()
        .flat_map(|(i, h)| {
            h.iter()
                .enumerate()
                .filter_map(move |(k, step)| step.map(|step| (step, i, k)))
        })
        .min();
    if let Some((step, i, k)) = earliest {
        let gap = s.lane.project(&preds[i].paths[k][step]) - s.along - LOS_HORIZONTAL_M - STOP_SHORT_MARGIN_M;
        if gap > 0.0 && s.speed > 0.0 {
            let a = -s.speed * s.speed / (2.0 * gap);
            if a > MAX_DECELERATION && a < 0.0 {
                candidates.push(a);
            }
        }
    }
    if current == 0.0 {
        candidates.retain(|&a| a >= s.rate);
        candidates.push(s.rate);
    }
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for a in candidates {
        let p = risk(frame, s, a, &preds);
        if p < best.1 || (p == best.1 && a > best.0) {
            best = (a, p);
        }
    }
    best.0
}

#[test]
fn rate_selection_matches_brute_force() {
    let frame = LocalFrame::new(GIMPO).unwrap();
    let rates = RateSet::default();
    let std = SeparationStandard::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    let (mut risky, mut multi) = (0, 0);
    for i in 0..200 {
        let snap = random_snapshot(&mut rng, &rates);
        let inputs: Vec<IntruderPrediction<'_>> = snap.intruders.iter().map(Option::as_ref).collect();
        let decision = select_rate(&frame, &snap.state, &inputs, &rates, &std, PLAN_HORIZON).unwrap();
        let expected = brute_force_rate(&frame, &snap, &rates);
        if decision.rate.to_bits() != expected.to_bits() {
            mismatches.push((i, decision.rate, expected));
        }
        multi += usize::from(snap.intruders.len() > 1);
        let preds: Vec<&PredictionSet> = snap.intruders.iter().flatten().collect();
        risky += usize::from(risk(&frame, &snap.state, snap.state.rate, &preds) > 0.0);
    }
    let ok = mismatches.is_empty();
    verdict(
        "rate selection matches brute force",
        ok,
        format!("200 snapshots ({multi} multi-intruder, {risky} at risk), mismatches {mismatches:?}"),
    );
    assert!(ok);
}

fn uamflow(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_uamflow"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex::encode(Sha256::digest(fs::read(&p).unwrap())))
        })
        .collect()
}

#[test]
fn cli_reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut scenario = ScenarioConfig::reference();
    scenario.duration_s = 900;
    scenario.altitudes_ft = vec![2000.0];
    scenario.prediction.samples = 20;
    let configs = [
        ("synth.json", r#"{"task":"bimodal_turn","count":20}"#.to_string()),
        ("ingest.json", r#"{"input":"a/synth/trajectories.csv"}"#.to_string()),
        (
            "train.json",
            r#"{"dataset":"a/ingest/dataset.json","model":"flow",
                "layers":{"hidden":8,"flow_layers":2,"flow_width":16},
                "schedule":{"batch_size":8,"epochs":2}}"#
                .to_string(),
        ),
        (
            "eval.json",
            r#"{"dataset":"a/ingest/dataset.json","checkpoints":["a/train/checkpoint.json"],"samples":10}"#.to_string(),
        ),
        ("scenario.json", serde_json::to_string(&scenario).unwrap()),
    ];
    for (name, body) in &configs {
        fs::write(dir.join(name), body).unwrap();
    }
    let steps: [(&str, Vec<&str>); 7] = [
        ("synth", vec!["synth", "--config", "synth.json", "--seed", "4"]),
        ("ingest", vec!["ingest", "--config", "ingest.json", "--seed", "4"]),
        ("train", vec!["train", "--config", "train.json", "--seed", "4"]),
        ("eval", vec!["eval", "--config", "eval.json", "--seed", "4"]),
        (
            "baseline",
            vec![
                "simulate",
                "--config",
                "scenario.json",
                "--seed",
                "4",
                "--mode",
                "baseline",
            ],
        ),
        (
            "adjusted",
            vec![
                "simulate",
                "--config",
                "scenario.json",
                "--seed",
                "4",
                "--mode",
                "adjusted",
                "--checkpoint",
                "a/train/checkpoint.json",
            ],
        ),
        (
            "report",
            vec!["report", "a/baseline/results.json", "a/adjusted/results.json"],
        ),
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, args) in &steps {
        for run in ["a", "b"] {
            let out = format!("{run}/{name}");
            let mut full = args.clone();
            full.extend(["--out", &out]);
            uamflow(&full, dir);
        }
        let (a, b) = (digests(&dir.join("a").join(name)), digests(&dir.join("b").join(name)));
        assert!(a.len() >= 2, "{name}: {a:?}");
        compared += a.len();
        if a != b {
            differing.push(*name);
        }
    }
    let ok = differing.is_empty();
    verdict(
        "cli reruns are bit identical",
        ok,
        format!(
            "{} commands, {compared} files compared, differing {differing:?}",
            steps.len()
        ),
    );
    assert!(ok);
}

fn offset_path(truth: &[EnuPoint], de: f64) -> Vec<EnuPoint> {
    truth
        .iter()
        .map(|p| EnuPoint::new(p.east + de, p.north, p.up))
        .collect()
}

#[test]
fn metric_examples() {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let truth: Vec<EnuPoint> = (0..5).map(|i| EnuPoint::new(0.0, 10.0 * i as f64, 100.0)).collect();
    checks.push((
        "minADE of the truth is 0",
        min_ade(std::slice::from_ref(&truth), &truth).unwrap() == 0.0,
    ));
    let offsets = [offset_path(&truth, 1.0), offset_path(&truth, -3.0)];
    checks.push((
        "minADE of 1 m and 3 m offsets is 1 m",
        min_ade(&offsets, &truth).unwrap() == 1.0,
    ));
    let more = [offsets[0].clone(), offsets[1].clone(), offset_path(&truth, 7.0)];
    checks.push((
        "another sample never raises minADE",
        min_ade(&more, &truth).unwrap() <= 1.0,
    ));
    checks.push((
        "minFDE of the truth is 0",
        min_fde(std::slice::from_ref(&truth), &truth).unwrap() == 0.0,
    ));
    let mut end2 = truth.clone();
    end2[4].east += 2.0;
    let mut end5 = truth.clone();
    end5[4].north -= 5.0;
    checks.push((
        "minFDE of 2 m and 5 m endpoints is 2 m",
        min_fde(&[end5, end2], &truth).unwrap() == 2.0,
    ));

    let frame = LocalFrame::new(GIMPO).unwrap();
    let criteria = EncounterCriteria::default();
    let probe = |east: f64, up: f64| {
        let snap = Snapshot {
            uams: vec![EnuPoint::new(0.0, 0.0, 600.0)],
            intruders: vec![EnuPoint::new(east, 0.0, 600.0 + up)],
        };
        !encounter_pairs(&frame, &snap, &criteria).is_empty()
    };
    checks.push(("3 nm apart is no encounter", !probe(units::nautical_miles(3.0), 0.0)));
    checks.push((
        "1.5 nm and 1000 ft is an encounter",
        probe(units::nautical_miles(1.5), units::feet(1000.0)),
    ));
    checks.push(("exactly 2 nm is no encounter", !criteria.contains(3704.0, 0.0)));
    checks.push((
        "exactly 1200 ft is no encounter",
        !criteria.contains(0.0, units::feet(1200.0)),
    ));

    let mut quiet = ScenarioConfig::reference();
    quiet.traffic = TrafficSource::None;
    quiet.altitudes_ft = vec![1500.0];
    quiet.duration_s = 600;
    let traffic = build_traffic(&quiet, None).unwrap();
    let stub = TruthInSamples::new(truth_tracks(&traffic), 10, 60, 60);
    let r = run(&quiet, 0, 1500.0, SimMode::Adjusted, &traffic, Some(&stub), 0).unwrap();
    let done: Vec<_> = r.flights.iter().filter(|f| f.delay_proportion.is_some()).collect();
    checks.push((
        "a 14 km lane is planned at 240 s",
        r.flights.iter().all(|f| (f.planned_time_s - 240.0).abs() < 1e-9),
    ));
    checks.push((
        "no traffic means no delay and no CPA records",
        !done.is_empty() && done.iter().all(|f| f.delay_proportion == Some(0.0) && f.cpa.is_empty()),
    ));

    let x = crossing_scenario(0);
    let p = &x.cfg.prediction;
    let stub = TruthInSamples::new(truth_tracks(&x.traffic), p.samples, p.history, p.horizon);
    let r = run(&x.cfg, 0, x.altitude_ft, SimMode::Adjusted, &x.traffic, Some(&stub), 0).unwrap();
    let delayed: Vec<_> = r
        .flights
        .iter()
        .filter(|f| f.delay_proportion.is_some_and(|d| d > 0.0))
        .collect();
    checks.push((
        "delay proportion is the delay over the planned time",
        !delayed.is_empty()
            && delayed.iter().all(|f| {
                let d = f.delay_proportion.unwrap();
                let expected = (f.actual_time_s.unwrap() - f.planned_time_s) / f.planned_time_s;
                (d - expected).abs() <= 1e-12
            }),
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let ok = failed.is_empty();
    verdict(
        "metric examples",
        ok,
        format!("{} checks, failed {failed:?}", checks.len()),
    );
    assert!(ok);
}
