//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::{Duration, Instant};

use common::{
    all_adjacent_probability, chi_square_uniform_p, fd_gradient, naive_mean, rel_err, run, scenario,
};
use dflshield_core::crypto::{
    issue_token, open, renew_session, seal, verify_token, CryptoError, KemKeyPair, ReplayCache,
    SecureEnvelope, SessionKey, SigningKeyPair,
};
use dflshield_core::fabric::{AddressPool, PeerAddress};
use dflshield_core::ids::{NodeId, Role, SecuritySetting};
use dflshield_core::model::{aggregate_fedavg, gradient, Activation, ModelArchitecture, ModelParams};
use dflshield_core::mtd::{mtd_rotate_address, mtd_select_neighbors, AddressBook, NeighborPool, Rotation};
use dflshield_core::scenario::{sharing_set, write_artifacts, RunOutput, RunStatus, REPORT_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

const F1_FLOOR: f64 = 0.90;
const F1_BAND: f64 = 0.05;
const F1_SLACK: f64 = 0.02;
const MC_TOLERANCE: f64 = 0.01;
const MC_MIN_ROUNDS: u32 = 10_000;
const ALPHA: f64 = 0.01;
const FEDAVG_REL: f64 = 1e-12;
const GRAD_REL: f64 = 1e-4;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Verdict) -> Verdict {
    let t = Instant::now();
    let v = f();
    let took = t.elapsed();
    let within = took <= limit;
    verdict(
        v.pass && within,
        format!("{} [{:.1}s, limit {}s]", v.detail, took.as_secs_f64(), limit.as_secs()),
    )
}

fn f1(out: &RunOutput) -> f64 {
    out.summary.final_f1.map(|f| f.mean).unwrap_or(f64::NAN)
}

fn complete(out: &RunOutput) -> bool {
    out.status() == &RunStatus::Completed && out.summary.reports == out.summary.expected_reports
}

fn overhead_ordering(b: &RunOutput, e: &RunOutput, m: &RunOutput) -> (bool, String) {
    let (sb, se, sm) = (&b.summary, &e.summary, &m.summary);
    let ok = sb.total_bytes < se.total_bytes
        && se.total_bytes < sm.total_bytes
        && sb.ctrl_overhead_pct < se.ctrl_overhead_pct
        && se.ctrl_overhead_pct < sm.ctrl_overhead_pct;
    (
        ok,
        format!(
            "bytes {} < {} < {}, ctrl% {:.2} < {:.2} < {:.2}",
            sb.total_bytes,
            se.total_bytes,
            sm.total_bytes,
            sb.ctrl_overhead_pct,
            se.ctrl_overhead_pct,
            sm.ctrl_overhead_pct
        ),
    )
}

fn c1(runs: &[RunOutput; 3]) -> Verdict {
    let [b, e, m] = runs;
    let (fb, fe, fm) = (f1(b), f1(e), f1(m));
    let ok = runs.iter().all(complete)
        && fb >= F1_FLOOR
        && (fe - fb).abs() <= F1_BAND
        && (fm - fb).abs() <= F1_BAND
        && fb >= fe
        && fe >= fm - F1_SLACK;
    verdict(ok, format!("F1 B={fb:.4} E={fe:.4} M={fm:.4}"))
}

fn c2(runs: &[RunOutput; 3]) -> Verdict {
    let (ok, d) = overhead_ordering(&runs[0], &runs[1], &runs[2]);
    verdict(ok, d)
}

fn c3() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for name in ["eclipse-baseline", "eclipse-encryption", "eclipse-mtd"] {
        let cfg = scenario(name);
        let plan = cfg.attack.clone().expect("eclipse plan");
        let out = run(&cfg);
        let a = out.attack.clone().expect("attack outcome");
        let rec = a.plaintext_param_sets_recovered;
        let pass = match cfg.scenario.security {
            SecuritySetting::Baseline => {
                let window = plan.window(cfg.scenario.rounds);
                let rounds_with_recovery: BTreeSet<u32> = out
                    .capture
                    .as_ref()
                    .map(|c| c.recovered_params.iter().map(|r| r.round).filter(|r| window.contains(r)).collect())
                    .unwrap_or_default();
                notes.push(format!("Baseline rounds with recovery {}", rounds_with_recovery.len()));
                rounds_with_recovery.len() as u32 >= a.isolated_rounds && a.isolated_rounds > 0 && a.success
            }
            SecuritySetting::Encryption => {
                a.isolated_rounds as f64 >= 0.8 * a.window_rounds as f64 && rec == 0 && !a.success
            }
            SecuritySetting::EncryptionMtd => {
                let target = plan.target_id();
                let m = sharing_set(&out).len() as u64 - 1;
                let adj = out.topology.degree(target) as u64;
                let n = cfg.mtd.sample_size.expect("sample size pinned") as u64;
                let want = all_adjacent_probability(m, adj, n);
                let got = a.sample_rate.unwrap_or(f64::NAN);
                notes.push(format!("MC {got:.4} vs {want:.4} (m={m} a={adj} n={n})"));
                rec == 0
                    && !a.success
                    && plan.monte_carlo_rounds >= MC_MIN_ROUNDS
                    && (got - want).abs() <= MC_TOLERANCE
            }
        };
        notes.push(format!(
            "{}: isolated {}/{} recovered {rec} success {}",
            cfg.scenario.security, a.isolated_rounds, a.window_rounds, a.success
        ));
        ok &= pass;
    }
    verdict(ok, notes.join("; "))
}

fn c4() -> Verdict {
    let pool = NeighborPool::new((0..10).map(NodeId), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut subsets: BTreeMap<BTreeSet<NodeId>, u64> = BTreeMap::new();
    for _ in 0..100_000 {
        *subsets.entry(mtd_select_neighbors(&pool, &mut rng)).or_default() += 1;
    }
    let counts: Vec<u64> = subsets.values().copied().collect();
    let p_sel = if counts.len() == 120 {
        chi_square_uniform_p(&counts)
    } else {
        0.0
    };

    let ip = Ipv4Addr::new(10, 1, 0, 1);
    let ports = AddressPool::new(vec![ip], 20000, 20009).unwrap();
    let book = AddressBook::new(PeerAddress::new(ip, 20000).unwrap());
    let mut port_counts = vec![0u64; 10];
    for _ in 0..1000 {
        if let Rotation::Moved { address, notice } =
            mtd_rotate_address(&book, NodeId(0), &ports, &BTreeSet::new(), 0, &mut rng)
        {
            port_counts[(address.port() - 20000) as usize] += 1;
            book.set_self_binding(address, notice.effective_epoch);
        }
    }
    let moved: u64 = port_counts.iter().sum();
    let p_port = chi_square_uniform_p(&port_counts);
    verdict(
        p_sel > ALPHA && p_port > ALPHA && moved == 1000,
        format!("selection p={p_sel:.4}, rotation p={p_port:.4} (alpha {ALPHA})"),
    )
}

fn c5() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(501);
    let sender = KemKeyPair::generate(&mut rng, 0, 0);
    let recipient = KemKeyPair::generate(&mut rng, 0, 0);
    let mut session = SessionKey::generate(&mut rng, 0).unwrap();
    let mut seal_one = |payload: &[u8], rng: &mut ChaCha20Rng| loop {
        match seal(payload, NodeId(1), &sender, &recipient.public_key(), &mut session, rng) {
            Ok(env) => return env.encode(),
            Err(CryptoError::NonceExhausted { .. }) => session = renew_session(&session, rng).unwrap(),
            Err(e) => panic!("seal: {e}"),
        }
    };
    let accept = |wire: &[u8], cache: &ReplayCache| -> Option<Vec<u8>> {
        let env = SecureEnvelope::decode(wire).ok()?;
        let plain = open(&env, &recipient, &sender.public_key()).ok()?;
        cache.check_and_record(env.sender_id, env.epoch, &env.nonce).ok()?;
        Some(plain)
    };
    let payload = |rng: &mut ChaCha20Rng| -> Vec<u8> {
        let n = rng.gen_range(1..2048);
        (0..n).map(|_| rng.gen()).collect()
    };

    let cache = ReplayCache::new();
    let mut round_trips = 0;
    for _ in 0..10_000 {
        let p = payload(&mut rng);
        let wire = seal_one(&p, &mut rng);
        if accept(&wire, &cache).as_deref() == Some(&p[..]) {
            round_trips += 1;
        }
    }

    let mut flipped = 0;
    for _ in 0..1000 {
        let p = payload(&mut rng);
        let mut wire = seal_one(&p, &mut rng);
        let bit = rng.gen_range(0..wire.len() * 8);
        wire[bit / 8] ^= 1 << (bit % 8);
        flipped += accept(&wire, &ReplayCache::new()).is_some() as u32;
    }
    let signer = SigningKeyPair::generate(&mut rng, 0);
    for i in 0..1000u32 {
        let t = issue_token(NodeId(i % 50), Role::Trainer, vec![], 1_000, 60_000, &signer).unwrap();
        let mut b = t.as_str().as_bytes().to_vec();
        let bit = rng.gen_range(0..b.len() * 8);
        b[bit / 8] ^= 1 << (bit % 8);
        if let Ok(s) = String::from_utf8(b) {
            flipped += verify_token(&s, &signer.verifying_key(), 2_000).is_ok() as u32;
        }
    }

    let replay_cache = ReplayCache::new();
    let mut replays = 0;
    for _ in 0..1000 {
        let wire = seal_one(&payload(&mut rng), &mut rng);
        accept(&wire, &replay_cache);
        replays += accept(&wire, &replay_cache).is_some() as u32;
    }
    verdict(
        round_trips == 10_000 && flipped == 0 && replays == 0,
        format!("round trips {round_trips}/10000, bit-flip acceptances {flipped}/2000, replay acceptances {replays}/1000"),
    )
}

fn c6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let mut worst_avg: f64 = 0.0;
    for _ in 0..100 {
        let sizes = vec![rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(2..5)];
        let arch = ModelArchitecture::new(sizes, Activation::Tanh).unwrap();
        let own = ModelParams::init(&arch, &mut rng).unwrap();
        let received: Vec<ModelParams> = (0..rng.gen_range(1..12))
            .map(|_| ModelParams::init(&arch, &mut rng).unwrap())
            .collect();
        let got = aggregate_fedavg(&own, &received).unwrap().to_flat();
        worst_avg = worst_avg.max(rel_err(&got, &naive_mean(&own, &received)));
    }
    let mut worst_grad: f64 = 0.0;
    for _ in 0..20 {
        let sizes = vec![rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(2..5)];
        let arch = ModelArchitecture::new(sizes, Activation::Tanh).unwrap();
        let params = ModelParams::init(&arch, &mut rng).unwrap();
        let x: Vec<f64> = (0..arch.inputs()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let label = rng.gen_range(0..arch.outputs());
        let (g, _) = gradient(&params, &x, label).unwrap();
        worst_grad = worst_grad.max(rel_err(&g.to_flat(), &fd_gradient(&params, &x, label, 1e-5)));
    }
    verdict(
        worst_avg <= FEDAVG_REL && worst_grad <= GRAD_REL,
        format!("FedAvg worst rel {worst_avg:.2e} (tol {FEDAVG_REL:e}), gradient worst rel {worst_grad:.2e} (tol {GRAD_REL:e})"),
    )
}

fn c7() -> Verdict {
    let mut cfg = scenario("encryption-mtd-8");
    cfg.scenario.name = "rotation-10".into();
    cfg.scenario.nodes = 10;
    cfg.scenario.rounds = 20;
    cfg.fabric.loss_rate = 0.0;
    cfg.mtd.rotation_interval = 1;
    let out = run(&cfg);
    let rotations: usize = out
        .nodes
        .iter()
        .flat_map(|n| &n.records)
        .filter(|r| r.rotated_to.is_some())
        .count();
    let s = &out.summary;
    verdict(
        complete(&out) && s.routing_errors == 0 && s.starved_rounds == 0 && rotations > 0,
        format!(
            "routing errors {}, starved rounds {}, rotations {rotations}, reports {}/{}",
            s.routing_errors, s.starved_rounds, s.reports, s.expected_reports
        ),
    )
}

fn c8() -> Verdict {
    let cfg = scenario("encryption-mtd-8");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    let mut csvs = Vec::new();
    for d in &dirs {
        let out = run(&cfg);
        write_artifacts(&out, d.path()).unwrap();
        reports.push(std::fs::read(d.path().join(REPORT_FILE)).unwrap());
        let mut all: Vec<(String, Vec<u8>)> = std::fs::read_dir(d.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        all.sort();
        csvs.push(all);
    }
    let same = reports[0] == reports[1] && csvs[0] == csvs[1];
    verdict(
        same && !reports[0].is_empty(),
        format!("{} CSV files, report {} bytes, identical {same}", csvs[0].len(), reports[0].len()),
    )
}

fn c9() -> Verdict {
    let runs = ["baseline-50", "encryption-50", "encryption-mtd-50"].map(|n| run(&scenario(n)));
    let (ok, d) = overhead_ordering(&runs[0], &runs[1], &runs[2]);
    verdict(
        ok && runs.iter().all(complete),
        format!("{d}, baseline F1 {:.4}", f1(&runs[0])),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, v: Verdict| {
        println!("{} criterion {n}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as u32;
    };

    let mut runs = None;
    let v1 = timed(Duration::from_secs(120), || {
        let r = ["baseline-8", "encryption-8", "encryption-mtd-8"].map(|n| run(&scenario(n)));
        let v = c1(&r);
        runs = Some(r);
        v
    });
    report(1, v1);
    report(2, c2(runs.as_ref().unwrap()));
    report(3, timed(Duration::from_secs(180), c3));
    report(4, timed(Duration::from_secs(30), c4));
    report(5, timed(Duration::from_secs(60), c5));
    report(6, c6());
    report(7, c7());
    report(8, c8());
    report(9, timed(Duration::from_secs(600), c9));

    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
