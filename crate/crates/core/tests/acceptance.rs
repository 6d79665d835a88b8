//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so that every criterion prints one PASS/FAIL line.
//!
//! `ICED_ACCEPTANCE=1,4,9` restricts the run to the listed criteria.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use iced_core::agent::{
    collect_rollouts, evaluate, gae, ppo_loss, prepare_batch, AgentConfig, AgentModel, CoreKind, Learner, PpoBatch,
    PpoConfig, SeqInput,
};
use iced_core::buffer::{
    p_lambda, p_lambda_mixed, rank_prioritization, score_value_loss, staleness_distribution, BufferEntry, LevelBuffer,
    Origin, SamplingConfig, SamplingMode,
};
use iced_core::designers::Method;
use iced_core::driver::{train, TrainConfig, TrainInputs};
use iced_core::env::{solvable, GridEnv, LevelParams, Tile};
use iced_core::levelgen::{
    generate_dataset, generate_dataset_tagged, goal_distances, navigable_components, pattern_by_name, GenConfig,
};
use iced_core::metrics::{gen_gap, jsd, shift_gap};
use iced_core::nn::{Graph, ParamId, Scalar};
use iced_core::probe::{mi_from_log_probs, Probe, ProbeConfig};
use iced_core::vae::{kl_standard_normal, pretrain, Vae, VaeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b} (tol {tol:e})"))
}

fn within(start: Instant, budget: Duration) -> std::result::Result<(), String> {
    let t = start.elapsed();
    ensure(t <= budget, || format!("took {:.1}s, budget {:.0}s", t.as_secs_f64(), budget.as_secs_f64()))
}

fn levels(n: usize, side: usize, seed: u64) -> Vec<LevelParams> {
    let cfg = GenConfig {
        height: side,
        width: side,
        seed,
        ..GenConfig::default()
    };
    generate_dataset(&cfg, n).expect("dataset generation")
}

// 1. Sampling distributions.

fn criterion_1() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..200 {
        let n = 1 + trial % 9;
        let ps: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let stamps: Vec<u64> = (0..n).map(|_| rng.gen_range(0..50)).collect();
        let pr = staleness_distribution(&stamps, 50);
        let p_s = rank_prioritization(&ps, 0.1);
        let rho = rng.gen::<f64>();
        let p = p_lambda(&p_s, &pr, rho).map_err(|e| e.to_string())?;
        close(p.iter().sum(), 1.0, 1e-9, "sum of P_lambda")?;
        let origins: Vec<Origin> =
            (0..n).map(|i| if i % 3 == 2 { Origin::Generated } else { Origin::TrainSet }).collect();
        let train: Vec<usize> = (0..n).filter(|&i| origins[i] == Origin::TrainSet).collect();
        let mut ps_t = vec![0.0; n];
        let mut pr_t = vec![0.0; n];
        let sub_s = rank_prioritization(&train.iter().map(|&i| ps[i]).collect::<Vec<_>>(), 0.1);
        let sub_r = staleness_distribution(&train.iter().map(|&i| stamps[i]).collect::<Vec<_>>(), 50);
        for (k, &i) in train.iter().enumerate() {
            ps_t[i] = sub_s[k];
            pr_t[i] = sub_r[k];
        }
        let ps2 = rank_prioritization(&ps, 0.1);
        for eta in [0.0, 0.3, 1.0] {
            let p = p_lambda_mixed(&ps_t, &ps2, &pr_t, rho, eta, &origins).map_err(|e| e.to_string())?;
            close(p.iter().sum(), 1.0, 1e-9, "sum of mixed P_lambda")?;
            if eta == 0.0 {
                let gen_mass: f64 = (0..n).filter(|&i| origins[i] == Origin::Generated).map(|i| p[i]).sum();
                ensure(gen_mass == 0.0, || format!("eta=0 puts {gen_mass} on generated levels"))?;
            }
        }
    }

    // Five entries: three training levels, two generated ones.
    let lv = levels(5, 9, 11);
    let cfg = SamplingConfig::default();
    let mut buf = LevelBuffer::new(lv[..3].to_vec(), cfg).map_err(|e| e.to_string())?;
    for (i, s) in [0.4, 0.1, 0.9].into_iter().enumerate() {
        buf.update_score(i, s, s * 0.5, true).map_err(|e| e.to_string())?;
    }
    for (k, l) in lv[3..].iter().enumerate() {
        let e = BufferEntry::generated(l.clone(), 0.2 + 0.5 * k as f64, 0.3 + 0.4 * k as f64, true);
        buf.admit_generated(e, true).map_err(|e| e.to_string())?;
    }
    for i in [2, 0, 4, 2, 3] {
        buf.mark_sampled(i);
    }
    let gen_mass: f64 = buf
        .distribution(SamplingMode::Mixed { eta: 0.0 })
        .map_err(|e| e.to_string())?
        .iter()
        .zip(buf.entries())
        .filter(|(_, e)| e.origin == Origin::Generated)
        .map(|(p, _)| p)
        .sum();
    ensure(gen_mass == 0.0, || format!("buffer at eta=0 puts {gen_mass} on generated levels"))?;

    let mut worst = f64::INFINITY;
    for mode in [SamplingMode::Prioritized, SamplingMode::Mixed { eta: 0.5 }] {
        let p = buf.distribution(mode).map_err(|e| e.to_string())?;
        close(p.iter().sum(), 1.0, 1e-9, "sum of buffer distribution")?;
        let draws = 100_000;
        let mut counts = [0usize; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..draws {
            // Each draw from the same buffer state; sampling advances staleness.
            let mut b = buf.clone();
            counts[b.sample(mode, &mut rng).map_err(|e| e.to_string())?] += 1;
        }
        let support: Vec<usize> = (0..5).filter(|&i| p[i] > 0.0).collect();
        for i in 0..5 {
            ensure(p[i] > 0.0 || counts[i] == 0, || format!("zero-mass entry {i} drawn"))?;
        }
        let chi2: f64 = support
            .iter()
            .map(|&i| {
                let e = p[i] * draws as f64;
                (counts[i] as f64 - e).powi(2) / e
            })
            .sum();
        let df = (support.len() - 1) as f64;
        let pval = 1.0 - ChiSquared::new(df).unwrap().cdf(chi2);
        ensure(pval > 0.01, || format!("{mode:?}: chi2 {chi2:.2}, p {pval:.4}"))?;
        worst = worst.min(pval);
    }
    within(t0, Duration::from_secs(10))?;
    Ok(format!("sums within 1e-9, eta=0 support holds, chi-square min p {worst:.3}"))
}

// 2. Closed forms against brute-force oracles.

/// Advantage as the explicit truncated sum of discounted TD errors.
fn brute_gae(r: &[f64], v: &[f64], done: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if done[t] { 0.0 } else if t + 1 < n { v[t + 1] } else { boot };
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            let mut w = 1.0;
            for l in t..n {
                a += w * (r[l] + gamma * next_v(l) - v[l]);
                if done[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            a
        })
        .collect()
}

fn brute_rank(scores: &[f64], temperature: f64) -> Vec<f64> {
    let h: Vec<f64> = scores
        .iter()
        .map(|&s| {
            let rank = 1 + scores.iter().filter(|&&o| o > s).count();
            (1.0 / rank as f64).powf(1.0 / temperature)
        })
        .collect();
    let z: f64 = h.iter().sum();
    h.iter().map(|x| x / z).collect()
}

fn kl_by_quadrature(mu: f64, sigma: f64) -> f64 {
    // Simpson's rule on KL(N(mu, sigma^2) || N(0, 1)) over +-14 sigma.
    let (a, b) = (mu - 14.0 * sigma, mu + 14.0 * sigma);
    let n = 40_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let z = (x - mu) / sigma;
        let log_q = -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_p = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_q.exp() * (log_q - log_p)
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn brute_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            s += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            s += 0.5 * b * (b / m).ln();
        }
    }
    s
}

fn criterion_2() -> Check {
    let t0 = Instant::now();
    let err = |e: iced_core::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let hand = rank_prioritization(&[0.5, 0.2, 0.9], 1.0);
    for (a, b) in hand.iter().zip([3.0 / 11.0, 2.0 / 11.0, 6.0 / 11.0]) {
        close(*a, b, 1e-12, "rank hand case")?;
    }
    for _ in 0..200 {
        let n = rng.gen_range(1..12);
        let s: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let t = [0.1, 0.5, 1.0, 3.0][rng.gen_range(0..4)];
        for (a, b) in rank_prioritization(&s, t).iter().zip(brute_rank(&s, t)) {
            close(*a, b, 1e-9, "rank vs enumeration")?;
        }
    }
    let pr = staleness_distribution(&[2, 0], 3);
    close(pr[0], 0.25, 1e-12, "staleness ages [1,3]")?;
    close(pr[1], 0.75, 1e-12, "staleness ages [1,3]")?;
    // Two training levels and one generated level.
    let origins = [Origin::TrainSet, Origin::TrainSet, Origin::Generated];
    let (ps_t, ps2, pr_t) = ([0.625, 0.375, 0.0], [0.1, 0.6, 0.3], [0.5, 0.5, 0.0]);
    let mixed = p_lambda_mixed(&ps_t, &ps2, &pr_t, 0.3, 0.5, &origins).map_err(err)?;
    for i in 0..3 {
        let want = 0.7 * (0.5 * ps_t[i] + 0.5 * ps2[i]) + 0.3 * pr_t[i];
        close(mixed[i], want, 1e-12, "mixed hand case")?;
    }
    close(score_value_loss(&[1.0, -1.0, 2.0]).map_err(err)?, 4.0 / 3.0, 1e-12, "value-loss score")?;

    let (a, _) = gae(&[1.0], &[0.5], &[true], 0.0, 0.995, 0.95);
    close(a[0], 0.5, 1e-12, "terminal-step GAE")?;
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        let boot = rng.gen_range(-1.0..1.0);
        let (g, l) = (rng.gen_range(0.8..1.0), rng.gen_range(0.0..1.0));
        let (a, ret) = gae(&r, &v, &d, boot, g, l);
        for (t, (x, y)) in a.iter().zip(brute_gae(&r, &v, &d, boot, g, l)).enumerate() {
            close(*x, y, 1e-9, "GAE vs TD sum")?;
            close(ret[t], x + v[t], 1e-12, "GAE return")?;
        }
    }

    close(kl_standard_normal(&[0.0], &[0.0]), 0.0, 1e-12, "KL at N(0,1)")?;
    close(kl_standard_normal(&[1.0], &[0.0]), 0.5, 1e-12, "KL mu=1")?;
    for (mu, ls) in [(0.3f32, -0.4f32), (-1.2, 0.5), (2.0, -1.0), (0.0, 0.25)] {
        let q = kl_by_quadrature(mu as f64, (ls as f64).exp());
        close(kl_standard_normal(&[mu], &[ls]), q, 1e-9, "KL vs quadrature")?;
    }

    close(jsd(&[1.0, 0.0], &[0.5, 0.5]).map_err(err)?, 0.2158, 1e-4, "JSD hand case")?;
    close(jsd(&[1.0, 0.0], &[0.0, 1.0]).map_err(err)?, 2f64.ln(), 1e-12, "JSD disjoint")?;
    for _ in 0..100 {
        let n = rng.gen_range(2..20);
        let mut p: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen() }).collect();
        let mut q: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen() }).collect();
        p[0] += 0.1;
        q[n - 1] += 0.1;
        for v in [&mut p, &mut q] {
            let z: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= z);
        }
        close(jsd(&p, &q).map_err(err)?, brute_jsd(&p, &q), 1e-9, "JSD vs definition")?;
    }

    close(gen_gap(&[0.8, 0.6], &[0.5, 0.3]).map_err(err)?, 0.3, 1e-12, "GenGap hand case")?;
    let v = [1.0, 0.5, 0.0];
    close(shift_gap(&[0.5, 0.3, 0.2], &v, &v).map_err(err)?, 0.65 - 0.5, 1e-12, "ShiftGap hand case")?;
    close(shift_gap(&[1.0 / 3.0; 3], &v, &v).map_err(err)?, 0.0, 1e-12, "ShiftGap uniform")?;
    within(t0, Duration::from_secs(10))?;
    Ok("rank, staleness, mixture, GAE, KL, JSD, GenGap, ShiftGap match oracles".into())
}

// 3. Finite-difference gradients.

fn relative_ok(a: f64, n: f64, floor: f64) -> bool {
    (a - n).abs() <= 1e-3 * a.abs().max(n.abs()).max(floor)
}

fn ppo_toy_batch(model: &AgentModel<f64>, steps: usize) -> PpoBatch {
    let env = GridEnv::new(LevelParams::from_ascii(&["#####", "#S.G#", "#####"]).unwrap(), 20).unwrap();
    let (mut s, mut o) = env.reset(3);
    let (mut views, mut headings, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..steps {
        views.extend_from_slice(&o.view);
        headings.extend_from_slice(&o.heading);
        let a = [2, 1][t % 2];
        actions.push(a);
        let out = env.step(&s, a).unwrap();
        s = out.state;
        o = out.obs;
    }
    let input = SeqInput {
        steps,
        batch: 1,
        views,
        headings,
        resets: vec![false; steps],
    };
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, &input, None).unwrap();
    let lp = g.log_softmax(out.logits);
    let lp = g.gather(lp, &actions).unwrap();
    let cur: Vec<f64> = g.value(lp).data.iter().map(|x| x.as_f64()).collect();
    let vals: Vec<f64> = g.value(out.values).data.iter().map(|x| x.as_f64()).collect();
    PpoBatch {
        input,
        actions,
        old_log_probs: cur.iter().enumerate().map(|(i, c)| c - [0.05, 0.7][i % 2]).collect(),
        old_values: vals.iter().enumerate().map(|(i, v)| v + [0.05, -0.6][i % 2]).collect(),
        advantages: (0..steps).map(|i| [0.8, 1.3][i % 2]).collect(),
        returns: (0..steps).map(|i| 0.3 + 0.1 * i as f64).collect(),
    }
}

fn criterion_3() -> Check {
    let t0 = Instant::now();
    let h = 1e-6;
    let mut checked = 0usize;
    let cfg = AgentConfig {
        core: CoreKind::Lstm,
        hidden: 3,
        conv_channels: 2,
        heading_dim: 2,
        head_hidden: 3,
    };
    let mut model = AgentModel::<f64>::new(cfg, 7);
    for (name, t) in model.params.names().to_vec().into_iter().zip(model.params.tensors_mut()) {
        if name.ends_with(".b") {
            t.data.iter_mut().enumerate().for_each(|(i, x)| *x = 0.05 + 0.01 * (i % 5) as f64);
        }
    }
    let batch = ppo_toy_batch(&model, 2);
    let ppo = PpoConfig::default();
    let analytic = {
        let mut g = Graph::new(&model.params);
        let (loss, _) = ppo_loss(&model, &mut g, &batch, &ppo).map_err(|e| e.to_string())?;
        g.backward(loss).map_err(|e| e.to_string())?
    };
    let eval = |m: &AgentModel<f64>| {
        let mut g = Graph::new(&m.params);
        ppo_loss(m, &mut g, &batch, &ppo).unwrap().1.total
    };
    for p in 0..model.params.len() {
        let id = ParamId(p);
        for i in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data[i];
            model.params.get_mut(id).data[i] = orig + h;
            let up = eval(&model);
            model.params.get_mut(id).data[i] = orig - h;
            let down = eval(&model);
            model.params.get_mut(id).data[i] = orig;
            let (a, n) = (analytic.get(id).data[i], (up - down) / (2.0 * h));
            ensure(relative_ok(a, n, 1e-4), || format!("PPO {} [{i}]: {a} vs {n}", model.params.names()[p]))?;
            checked += 1;
        }
    }

    let vcfg = VaeConfig {
        height: 3,
        width: 3,
        latent: 2,
        conv_layers: 1,
        conv_dim: 2,
        dense: 5,
        bottleneck: 3,
        decoder_layers: 1,
        decoder_dim: 4,
        ..VaeConfig::desk()
    };
    let mut vae = Vae::<f64>::new(vcfg, 3).map_err(|e| e.to_string())?;
    let a = LevelParams::from_ascii(&["S.#", ".m.", "l.G"]).unwrap();
    let b = LevelParams::from_ascii(&["G#.", "..m", "#.S"]).unwrap();
    let eps = [0.3f32, -0.7, 1.1, 0.2];
    let loss_of = |v: &Vae<f64>| {
        let mut g = Graph::new(&v.params);
        let (loss, _) = v.elbo_loss(&mut g, &[&a, &b], &eps).unwrap();
        (g.value(loss).item(), g.backward(loss).unwrap())
    };
    let (_, analytic) = loss_of(&vae);
    for p in 0..vae.params.len() {
        let id = ParamId(p);
        for i in 0..vae.params.get(id).len() {
            let orig = vae.params.get(id).data[i];
            vae.params.get_mut(id).data[i] = orig + h;
            let up = loss_of(&vae).0;
            vae.params.get_mut(id).data[i] = orig - h;
            let down = loss_of(&vae).0;
            vae.params.get_mut(id).data[i] = orig;
            let (an, n) = (analytic.get(id).data[i], (up - down) / (2.0 * h));
            ensure(relative_ok(an, n, 1e-3), || format!("ELBO {} [{i}]: {an} vs {n}", vae.params.names()[p]))?;
            checked += 1;
        }
    }
    within(t0, Duration::from_secs(60))?;
    Ok(format!("{checked} parameters within rel. tol 1e-3"))
}

// 4. Generated levels.

/// Pearson correlation and its two-sided p-value.
fn pearson(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r = sxy / (sxx * syy).sqrt();
    let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
    let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 2.0).unwrap().cdf(t.abs()));
    (r, p)
}

fn criterion_4() -> Check {
    let t0 = Instant::now();
    let cfg = GenConfig {
        seed: 4,
        ..GenConfig::default()
    };
    let data = generate_dataset_tagged(&cfg, 10_000).map_err(|e| e.to_string())?;
    ensure(data.len() == 10_000, || format!("{} levels", data.len()))?;
    for (k, g) in data.iter().enumerate() {
        let l = &g.level;
        let pattern = pattern_by_name(&g.pattern).ok_or("unknown pattern")?;
        ensure(pattern.validate_layout(&g.layout), || format!("level {k}: adjacency violation"))?;
        let (_, sizes) = navigable_components(&l.grid, l.height, l.width);
        ensure(sizes.len() == 1, || format!("level {k}: {} components", sizes.len()))?;
        ensure(l.start != l.goal && l.tile(l.start).navigable() && l.tile(l.goal).navigable(), || {
            format!("level {k}: bad start/goal")
        })?;
        ensure(solvable(l), || format!("level {k}: unsolvable"))?;
    }

    let (mut moss, mut neg_d, mut lava, mut d_wall) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for g in data.iter().take(200) {
        let l = &g.level;
        let dist = goal_distances(l);
        let dmax = dist.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
        for (i, (&t, d)) in l.grid.iter().zip(&dist).enumerate() {
            let Some(d) = d else { continue };
            let dn = *d as f64 / dmax;
            let cell = (i / l.width, i % l.width);
            if t.navigable() {
                if cell != l.start && cell != l.goal {
                    moss.push(f64::from(t == Tile::Moss));
                    neg_d.push(-dn);
                }
            } else {
                lava.push(f64::from(t == Tile::Lava));
                d_wall.push(dn);
            }
        }
    }
    let (rm, pm) = pearson(&moss, &neg_d);
    let (rl, pl) = pearson(&lava, &d_wall);
    ensure(rm > 0.0 && pm < 0.01, || format!("corr(moss, -d) = {rm:.3}, p = {pm:.2e}"))?;
    ensure(rl > 0.0 && pl < 0.01, || format!("corr(lava, d) = {rl:.3}, p = {pl:.2e}"))?;
    within(t0, Duration::from_secs(120))?;
    Ok(format!(
        "10000 levels valid; corr(moss,-d) {rm:.3} (p {pm:.1e}), corr(lava,d) {rl:.3} (p {pl:.1e})"
    ))
}

// 5. Learning sanity.

fn criterion_5() -> Check {
    let t0 = Instant::now();
    let level = LevelParams::from_ascii(&["###", "S.G", "###"]).map_err(|e| e.to_string())?;
    let ppo = PpoConfig::desk();
    let mut learner = Learner::new(AgentConfig::desk(), ppo, 5).map_err(|e| e.to_string())?;
    let assigned: Vec<(usize, &LevelParams)> = (0..ppo.workers).map(|_| (0, &level)).collect();
    let mut best = 0.0f64;
    for update in 1..=200u64 {
        let batch = collect_rollouts(&learner.model, &assigned, ppo.horizon, ppo.max_steps, update)
            .map_err(|e| e.to_string())?;
        let (b, _) = prepare_batch(&batch, &ppo);
        learner.update(&b, batch.workers).map_err(|e| e.to_string())?;
        if update % 10 == 0 {
            let ev = evaluate(&learner.model, &[&level], 100, ppo.max_steps, 1000 + update, false)
                .map_err(|e| e.to_string())?;
            best = best.max(ev[0].solved_rate);
            if ev[0].solved_rate >= 0.95 {
                within(t0, Duration::from_secs(300))?;
                return Ok(format!(
                    "solved rate {:.2} (return {:.3}) after {update} updates",
                    ev[0].solved_rate, ev[0].mean_return
                ));
            }
        }
    }
    Err(format!("best solved rate {best:.2} within 200 updates"))
}

// 6. Probe behaviour.

fn criterion_6() -> Check {
    let err = |e: iced_core::Error| e.to_string();
    let n = 64;
    let reps: Vec<f32> = (0..n).flat_map(|k| if k % 2 == 0 { [1.0, 0.0, 0.5] } else { [0.0, 1.0, 0.5] }).collect();
    let labels: Vec<usize> = (0..n).map(|k| k % 2).collect();
    let mut probe = Probe::new(2, 3, ProbeConfig::default(), 1).map_err(err)?;
    for _ in 0..500 {
        probe.train_step(&reps, &labels).map_err(err)?;
    }
    let sep = probe.accuracy(&reps, &labels).map_err(err)?;
    ensure(sep == 1.0, || format!("separable accuracy {sep}"))?;

    let (levels, m) = (4, 400);
    let same = vec![0.7f32; m * 2];
    let labels: Vec<usize> = (0..m).map(|k| k % levels).collect();
    let mut probe = Probe::new(levels, 2, ProbeConfig::default(), 2).map_err(err)?;
    for _ in 0..300 {
        probe.train_step(&same, &labels).map_err(err)?;
    }
    let acc = probe.accuracy(&same, &labels).map_err(err)?;
    let chance = 1.0 / levels as f64;
    let ci = 1.96 * (chance * (1.0 - chance) / m as f64).sqrt();
    ensure((acc - chance).abs() <= ci, || format!("identical-representation accuracy {acc}, chance {chance} +- {ci:.3}"))?;

    let l = 6;
    let perfect = mi_from_log_probs(&[0.0; 12], l).map_err(err)?;
    let uniform = mi_from_log_probs(&[-(l as f64).ln(); 12], l).map_err(err)?;
    ensure(perfect == (l as f64).ln(), || format!("perfect classifier MI {perfect}"))?;
    ensure(uniform.abs() < 1e-15, || format!("uniform classifier MI {uniform}"))?;
    Ok(format!("separable 1.0, identical {acc:.3} (chance {chance}), MI endpoints ln {l} and 0"))
}

// 7. Value-loss sampling versus uniform sampling.

fn criterion_7() -> Check {
    let t0 = Instant::now();
    let train_levels = levels(32, 9, 70);
    let inputs = TrainInputs {
        train: train_levels,
        eval_sets: Vec::new(),
        vae: None,
    };
    let mut lower = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let (mut acc, mut online) = ([0.0; 2], [0.0; 2]);
        for (k, method) in [Method::Uniform, Method::Plr].into_iter().enumerate() {
            let mut cfg = TrainConfig::desk(method);
            cfg.updates = 1000;
            cfg.eval_every = 1000;
            cfg.seed = seed;
            let res = train(&cfg, &inputs, None).map_err(|e| e.to_string())?;
            acc[k] = res.report.final_probe.ok_or("no final probe")?.accuracy;
            online[k] = res.rows.last().ok_or("no metrics row")?.probe_acc;
        }
        lower += usize::from(acc[1] < acc[0]);
        detail.push(format!("{:.3}/{:.3} (online {:.3}/{:.3})", acc[1], acc[0], online[1], online[0]));
    }
    let summary = format!("value-loss/uniform final probe accuracy per seed [{}]", detail.join(", "));
    ensure(lower >= 4, || format!("{summary}: lower in {lower}/5 seeds"))?;
    within(t0, Duration::from_secs(7200))?;
    Ok(format!("{summary}: lower in {lower}/5 seeds"))
}

// 8. In-context generation pipeline.

fn criterion_8() -> Check {
    let t0 = Instant::now();
    let data = levels(64, 9, 80);
    let (vae, _) = pretrain(&data, VaeConfig::desk(), 8).map_err(|e| e.to_string())?;
    let inputs = TrainInputs {
        train: data,
        eval_sets: Vec::new(),
        vae: Some(vae),
    };
    let mut cfg = TrainConfig::desk(Method::Iced);
    cfg.updates = 500;
    cfg.eval_every = 500;
    cfg.seed = 8;
    let res = train(&cfg, &inputs, None).map_err(|e| e.to_string())?;
    let rep = &res.report;
    ensure(rep.admitted_total >= 1, || format!("no generated level admitted ({} proposals)", rep.proposals_total))?;
    let generated: Vec<&BufferEntry> = res.buffer.entries().iter().filter(|e| e.origin == Origin::Generated).collect();
    ensure(generated.iter().all(|e| e.solved_once), || "an admitted level was never solved".into())?;
    ensure(rep.weights_unchanged, || "weights changed in a generative phase".into())?;
    ensure(rep.phases.iter().all(|p| p.fingerprint_before == p.fingerprint_after), || {
        "fingerprint mismatch".into()
    })?;
    ensure(rep.phases.len() == cfg.updates / cfg.generative_every, || format!("{} phases", rep.phases.len()))?;

    let thirds = |lo: f64, hi: f64| {
        let xs: Vec<f64> = rep
            .eta
            .iter()
            .zip(&rep.generated_fraction)
            .filter(|(e, _)| **e >= lo && **e < hi)
            .map(|(_, f)| *f)
            .collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    };
    let (early, mid, late) = (thirds(0.0, 1.0 / 3.0), thirds(1.0 / 3.0, 2.0 / 3.0), thirds(2.0 / 3.0, 1.1));
    ensure(rep.generated_fraction[0] == 0.0, || "generated rollouts at eta = 0".into())?;
    ensure(early <= mid && mid <= late && early < late, || {
        format!("generated fraction by eta third: {early:.3}, {mid:.3}, {late:.3}")
    })?;
    within(t0, Duration::from_secs(1800))?;
    Ok(format!(
        "{} admitted of {} proposals, {} in buffer, weights unchanged, generated fraction {early:.3} -> {mid:.3} -> {late:.3}",
        rep.admitted_total,
        rep.proposals_total,
        generated.len()
    ))
}

// 9. VAE generation quality.

fn criterion_9() -> Check {
    let t0 = Instant::now();
    let data = levels(64, 9, 90);
    let (_, rep) = pretrain(&data, VaeConfig::desk(), 9).map_err(|e| e.to_string())?;
    let msg = format!(
        "reconstruction solvability {:.3}, interpolation solvability {:.3}",
        rep.reconstruction_solvability, rep.interpolation_solvability
    );
    ensure(rep.reconstruction_solvability >= 0.6 && rep.interpolation_solvability >= 0.5, || msg.clone())?;
    ensure(rep.min_mu_distance > 0.0, || "two levels share an encoding".into())?;
    within(t0, Duration::from_secs(1200))?;
    Ok(msg)
}

// 10. Determinism.

fn criterion_10() -> Check {
    let data = levels(16, 9, 100);
    let test = levels(16, 9, 101);
    let inputs = TrainInputs {
        train: data,
        eval_sets: vec![("test".into(), test)],
        vae: None,
    };
    let mut bytes = 0;
    for method in [Method::Uniform, Method::Plr, Method::IcedEl, Method::Accel] {
        let mut cfg = TrainConfig::desk(method);
        cfg.updates = 30;
        cfg.eval_every = 10;
        cfg.seed = 10;
        let mut csv = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            train(&cfg, &inputs, Some(dir.path())).map_err(|e| e.to_string())?;
            csv.push(std::fs::read(dir.path().join("metrics.csv")).map_err(|e| e.to_string())?);
        }
        ensure(csv[0] == csv[1], || format!("{method}: metrics.csv differs between runs"))?;
        bytes += csv[0].len();
    }
    Ok(format!("metrics.csv identical for uniform, plr, iced-el, accel ({bytes} bytes)"))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Check); 10] = [
        (1, "distribution correctness", criterion_1),
        (2, "oracle equivalence", criterion_2),
        (3, "gradient integrity", criterion_3),
        (4, "environment validity", criterion_4),
        (5, "learning sanity", criterion_5),
        (6, "probe behaviour", criterion_6),
        (7, "value-loss sampling lowers probe accuracy", criterion_7),
        (8, "in-context generation pipeline", criterion_8),
        (9, "vae generation quality", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let only: Option<HashSet<usize>> = std::env::var("ICED_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id:>2} PASS ({name}, {secs:.1}s): {msg}"),
            Err(msg) => {
                println!("criterion {id:>2} FAIL ({name}, {secs:.1}s): {msg}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
