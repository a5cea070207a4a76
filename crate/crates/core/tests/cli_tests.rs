use std::fs;
use std::path::Path;

use fedquant::cli::{main_with_args, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK};
use fedquant::diffusion::Architecture;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["fedquant"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut out = vec![r.headers().unwrap().iter().map(String::from).collect()];
    out.extend(
        r.records()
            .map(|rec| rec.unwrap().iter().map(String::from).collect()),
    );
    out
}

fn col(table: &[Vec<String>], name: &str) -> usize {
    table[0].iter().position(|h| h == name).unwrap()
}

#[test]
fn allocate_spans_three_bit_widths_and_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["allocate", "--oracle", "--out", out]), EXIT_OK);
    let t = rows(&dir.path().join("allocate.csv"));
    assert_eq!(
        t[0].join(","),
        "device_id,status,L,bits,theta,pi,f,P,E_cmp,E_com,E_total,clamped_theta,clamped_pi,E_oracle,oracle_gap"
    );
    assert_eq!(t.len(), 11);
    let mut bits: Vec<&str> = t[1..].iter().map(|r| r[col(&t, "bits")].as_str()).collect();
    bits.sort_unstable();
    bits.dedup();
    assert_eq!(bits, ["6", "7", "8"]);
    for r in &t[1..] {
        let gap: f64 = r[col(&t, "oracle_gap")].parse().unwrap();
        assert!(gap.abs() <= 1e-3);
    }
}

#[test]
fn sweep_point_and_trace_agree_with_allocate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["allocate", "--out", out]), EXIT_OK);
    assert_eq!(
        run(&[
            "sweep", "--param", "t_max", "--from", "15", "--to", "15", "--steps", "1", "--out", out
        ]),
        EXIT_OK
    );
    assert_eq!(run(&["nu-trace", "--device", "1", "--out", out]), EXIT_OK);
    let alloc = rows(&dir.path().join("allocate.csv"));
    let sweep = rows(&dir.path().join("sweep_t_max.csv"));
    let trace = rows(&dir.path().join("nu_trace.csv"));
    assert_eq!(sweep.len(), 2);
    let e = col(&alloc, "E_total");
    let mut total = 0.0;
    for k in 0..10 {
        let a = &alloc[k + 1][e];
        assert_eq!(&sweep[1][col(&sweep, &format!("E_device_{k}"))], a);
        total += a.parse::<f64>().unwrap();
    }
    let fleet: f64 = sweep[1][col(&sweep, "fleet_total")].parse().unwrap();
    assert!((fleet - total).abs() <= 1e-12 * total);
    assert_eq!(trace[0].join(","), "iteration,nu_lo,nu_hi,theta,pi,E_total");
    assert!(trace.len() - 1 <= 30);
    // The last row whose split fits the budget is the reported decision.
    let (th, pi, et) = (
        col(&trace, "theta"),
        col(&trace, "pi"),
        col(&trace, "E_total"),
    );
    let last_feasible = trace[1..]
        .iter()
        .rev()
        .find(|r| r[th].parse::<f64>().unwrap() + r[pi].parse::<f64>().unwrap() <= 1.0)
        .unwrap();
    assert_eq!(last_feasible[et], alloc[2][e]);
}

#[test]
fn sweeps_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["sweep", "--param", "t_max", "--out", out]), EXIT_OK);
    assert_eq!(
        run(&["sweep", "--param", "distance", "--out", out]),
        EXIT_OK
    );
    let fleet = |name: &str| -> Vec<f64> {
        let t = rows(&dir.path().join(name));
        let c = col(&t, "fleet_total");
        t[1..].iter().map(|r| r[c].parse().unwrap()).collect()
    };
    assert!(fleet("sweep_t_max.csv")
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    assert!(fleet("sweep_distance.csv")
        .windows(2)
        .all(|w| w[1] >= w[0] * (1.0 - 1e-9)));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[device]\nfmax = 1e9\n").unwrap();
    assert_eq!(
        run(&["--config", cfg.to_str().unwrap(), "allocate", "--out", out]),
        EXIT_CONFIG
    );
    fs::write(&cfg, "[device]\nP_max = -0.2\n").unwrap();
    assert_eq!(
        run(&["--config", cfg.to_str().unwrap(), "allocate", "--out", out]),
        EXIT_CONFIG
    );
    assert_eq!(
        run(&["--config", "/nonexistent/x.toml", "allocate", "--out", out]),
        EXIT_CONFIG
    );
    assert_eq!(run(&["frobnicate"]), EXIT_CONFIG);

    fs::write(&cfg, "[fleet]\nK = 2\n[[devices]]\nT_max_s = 2.0\n").unwrap();
    assert_eq!(
        run(&["--config", cfg.to_str().unwrap(), "allocate", "--out", out]),
        EXIT_INFEASIBLE
    );
    let t = rows(&dir.path().join("allocate.csv"));
    assert_eq!(t[1][1], "INFEASIBLE");
    assert_eq!(t[2][1], "OK");
    assert_eq!(
        run(&["--config", cfg.to_str().unwrap(), "nu-trace", "--out", out]),
        EXIT_INFEASIBLE
    );
    assert_eq!(
        run(&[
            "--config",
            cfg.to_str().unwrap(),
            "sweep",
            "--param",
            "t_max",
            "--from",
            "2",
            "--to",
            "15",
            "--steps",
            "3",
            "--out",
            out
        ]),
        EXIT_INFEASIBLE
    );
    let s = rows(&dir.path().join("sweep_t_max.csv"));
    assert_eq!(s[1][1], "INFEASIBLE");
    assert_eq!(s[3][1], "OK");
}

#[test]
fn quantbench_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        run(&[
            "quantbench",
            "--trials",
            "400",
            "--size",
            "200",
            "--out",
            out
        ]),
        EXIT_OK
    );
    let t = rows(&dir.path().join("quantbench.csv"));
    assert_eq!(
        t[0].join(","),
        "distribution,L,bits,M,trials,empirical_mse,bound,ratio,max_abs_z"
    );
    assert_eq!(t.len(), 10);
    for r in &t[1..] {
        let z: f64 = r[col(&t, "max_abs_z")].parse().unwrap();
        assert!(z <= 4.0);
        let ratio: f64 = r[col(&t, "ratio")].parse().unwrap();
        assert!(ratio.is_finite());
        if r[0] == "grid" {
            assert_eq!(r[col(&t, "empirical_mse")], "0");
        }
    }
}

#[test]
fn train_compare_is_reproducible_and_counts_bits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(
        &cfg,
        "seed = 3\n[fleet]\nK = 3\nrounds = 3\nlocal_iters = 1\nquality_every = 2\nquality_samples = 100\n\
         [device]\nD = 48\n[diffusion]\nT = 8\nhidden = 8\ntime_embed = 4\nbatch_size = 8\n",
    )
    .unwrap();
    let m = Architecture {
        time_embed: 4,
        hidden: 8,
    }
    .param_count() as u64;
    let mut outputs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let code = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "train",
            "--compare",
            "none,fixed8,on_demand",
        ]);
        assert_eq!(code, EXIT_OK);
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().into_string().unwrap(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].len(), 7);
    let s = rows(&dir.path().join("a/summary.csv"));
    assert_eq!(
        s[0].join(","),
        "mode,final_frechet,total_energy_J,total_bits,even_split_energy_J"
    );
    let bits = |mode: &str| -> u64 {
        s[1..].iter().find(|r| r[0] == mode).unwrap()[3]
            .parse()
            .unwrap()
    };
    assert_eq!(bits("none"), 3 * 3 * m * 32);
    assert_eq!(bits("fixed8"), 3 * 3 * m * 8);
    assert!(bits("on_demand") <= bits("fixed8"));
}
