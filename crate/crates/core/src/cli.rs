//! Command-line front end.
//!
//! Every subcommand reads one problem (a JSON file, or the name of a shipped
//! fixture), writes its artifacts under `--out` and appends one record to
//! `runs.ndjson` there. Exit status: 0 on success, 2 when the answer is
//! negative (infeasible, attenuation violated, verification failed), 1 on
//! error.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::brl::{brl_cdre_solve, hinf_norm, BrlOptions};
use crate::closedloop::{synthesize, ClosedLoopOptions};
use crate::error::{Error, Result};
use crate::mcsim::{self, Estimate, NashOptions, Policy};
use crate::model::{fixtures, parse_problem, InitialLaw, MFSystem, SolverSettings};
use crate::numerics::{Mat, MatrixTrajectory};
use crate::openloop::{openloop_solve, stationarity_residual, Certificate};
use crate::oracle::{tree_operator_norm, TreeOutput};

#[derive(Debug, Parser)]
#[command(name = "mfhinf", version, about = "Mixed H2/H-infinity synthesis for mean-field stochastic systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Problem file, or the name of a shipped fixture (sysA, sysB, zero, nomf).
    #[arg(long)]
    pub problem: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Attenuation level; defaults to the problem's γ.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Monte Carlo paths; defaults to the problem's settings.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    /// Closed-loop Nash pair.
    Closed,
    /// Open-loop Nash pair in its feedback representation.
    Open,
    /// `u = 0`, `v = 0`.
    Zero,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Smallest attenuation level certified by the bounded real lemma.
    Hinf {
        #[command(flatten)]
        common: Common,
        /// Bisection tolerance; defaults to the problem's settings.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Bounded real lemma at one level.
    Brl {
        #[command(flatten)]
        common: Common,
        /// Constant deviation output matrix (JSON rows), replacing Q.
        #[arg(long, requires = "weights_mean")]
        weights_dev: Option<PathBuf>,
        /// Constant mean output matrix (JSON rows), replacing Q.
        #[arg(long, requires = "weights_dev")]
        weights_mean: Option<PathBuf>,
    },
    /// Open-loop Nash strategy and its stationarity residuals.
    SynthOpen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Closed-loop Nash feedback pair.
    SynthClosed {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo ensemble under a policy pair.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: McArgs,
        #[arg(long, value_enum, default_value = "closed")]
        policy: PolicyChoice,
        /// Replace expectations by particle averages.
        #[arg(long)]
        particle_mode: bool,
    },
    /// Nash inequalities and the completion-of-squares identity by Monte Carlo.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mc: McArgs,
        /// Random perturbations per player.
        #[arg(long, default_value_t = 100)]
        perturbations: usize,
    },
    /// Tree-oracle convergence table against the bounded-real-lemma norm.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Deepest tree; depths 2, 4, … up to this are tabulated.
        #[arg(long, default_value_t = 12)]
        depth: usize,
        #[arg(long)]
        tol: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Hinf { .. } => "hinf",
            Command::Brl { .. } => "brl",
            Command::SynthOpen { .. } => "synth-open",
            Command::SynthClosed { .. } => "synth-closed",
            Command::Simulate { .. } => "simulate",
            Command::Verify { .. } => "verify",
            Command::Oracle { .. } => "oracle",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Hinf { common, .. }
            | Command::Brl { common, .. }
            | Command::SynthOpen { common, .. }
            | Command::SynthClosed { common }
            | Command::Simulate { common, .. }
            | Command::Verify { common, .. }
            | Command::Oracle { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Feasible,
    Infeasible,
    Error,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Feasible => 0,
            Outcome::Infeasible => 2,
            Outcome::Error => 1,
        }
    }
}

/// One line of `runs.ndjson`.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub problem: String,
    pub problem_sha256: String,
    pub settings: SolverSettings,
    pub wall_time_s: f64,
    pub outcome: Outcome,
    pub message: Option<String>,
    pub artifacts: Vec<String>,
}

struct Problem {
    sys: MFSystem,
    law: InitialLaw,
    settings: SolverSettings,
    digest: String,
}

fn load(spec: &str) -> Result<Problem> {
    let text = match fixtures::text(spec) {
        Some(t) if !Path::new(spec).exists() => t.to_string(),
        _ => fs::read_to_string(spec)?,
    };
    let (sys, law, settings) = parse_problem(&text)?;
    let digest = hex::encode(Sha256::digest(text.as_bytes()));
    Ok(Problem { sys, law, settings, digest })
}

fn read_matrix(path: &Path) -> Result<Mat> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!("{}: ragged or empty matrix", path.display())));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

/// `{:.16e}`: 17 significant digits, exact round trip.
pub fn num(x: f64) -> String {
    // no "-0" in the output
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

/// CSV with a leading `s` column and one column per matrix entry, row
/// major, named `NAME_ij` (1-based).
pub fn trajectory_csv(name: &str, t: &MatrixTrajectory) -> String {
    let (r, c) = t.shape();
    let mut out = String::from("s");
    for i in 1..=r {
        for j in 1..=c {
            out.push_str(&format!(",{name}_{i}{j}"));
        }
    }
    out.push('\n');
    for (k, s) in t.grid().nodes().enumerate() {
        out.push_str(&num(s));
        let m = t.at(k);
        for i in 0..r {
            for j in 0..c {
                out.push(',');
                out.push_str(&num(m[(i, j)]));
            }
        }
        out.push('\n');
    }
    out
}

struct Run<'a> {
    out: &'a Path,
    artifacts: Vec<String>,
    lines: Vec<String>,
}

impl Run<'_> {
    fn write(&mut self, file: &str, body: &str) -> Result<()> {
        let path = self.out.join(file);
        fs::write(&path, body)?;
        self.artifacts.push(path.display().to_string());
        Ok(())
    }

    fn traj(&mut self, name: &str, t: &MatrixTrajectory) -> Result<()> {
        self.write(&format!("{name}.csv"), &trajectory_csv(name, t))
    }

    fn say(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }
}

fn mc(p: &Problem, a: &McArgs) -> (usize, u64) {
    (a.paths.unwrap_or(p.settings.mc_paths), a.seed.unwrap_or(p.settings.seed))
}

fn execute(cmd: &Command, p: &Problem, run: &mut Run<'_>) -> Result<Outcome> {
    let gamma = cmd.common().gamma.unwrap_or(p.sys.gamma);
    let sys = &p.sys;
    let delta = p.settings.delta_margin;
    match cmd {
        Command::Hinf { tol, .. } => {
            let g = hinf_norm(sys, tol.unwrap_or(p.settings.bisect_tol), &BrlOptions::with_delta(delta))?;
            run.say("gamma_star", num(g));
            Ok(Outcome::Feasible)
        }
        Command::Brl { weights_dev, weights_mean, .. } => {
            let mut opts = BrlOptions::with_delta(delta);
            if let (Some(d), Some(m)) = (weights_dev, weights_mean) {
                let (d, m) = (read_matrix(d)?, read_matrix(m)?);
                opts.weights = Some((MatrixTrajectory::constant(sys.grid, d), MatrixTrajectory::constant(sys.grid, m)));
            }
            let sol = brl_cdre_solve(sys, gamma, &opts)?;
            run.say("feasible", true);
            run.say("gamma", num(gamma));
            run.say("j1_star", num(sol.optimal_cost(sys, &p.law)));
            run.traj("P", &sol.p)?;
            run.traj("Pi", &sol.pi)?;
            run.traj("F", &sol.gain)?;
            run.traj("Fbar", &sol.gain_bar)?;
            run.traj("f", &sol.offset)?;
            Ok(Outcome::Feasible)
        }
        Command::SynthOpen { mc: m, .. } => {
            let sol = openloop_solve(sys, gamma)?;
            let (paths, seed) = mc(p, m);
            let res = stationarity_residual(sys, &sol, &p.law, paths, seed)?;
            let cert = sol.certificate(sys, p.settings.bisect_tol)?;
            run.say("certificate", cert);
            run.say("stationarity_residual_u", num(res.res_u));
            run.say("stationarity_residual_v", num(res.res_v));
            run.traj("K", sol.k())?;
            run.traj("Ktilde", sol.ktilde())?;
            run.traj("chi", &sol.chi)?;
            run.traj("Pbold", &sol.riccati.p)?;
            run.traj("Pibold", &sol.riccati.pi)?;
            Ok(if cert == Certificate::Violated { Outcome::Infeasible } else { Outcome::Feasible })
        }
        Command::SynthClosed { .. } => {
            let sol = synthesize(sys, gamma, &p.law, &closed_opts(delta))?;
            run.say("j1_star", num(sol.j1star));
            run.say("j2_star", num(sol.j2star));
            run.say("gainbound_ok", sol.gainbound_ok);
            let r = &sol.riccati;
            let a = &sol.affine;
            for (name, t) in [
                ("P1", &r.p1),
                ("P2", &r.p2),
                ("Pi1", &r.pi1),
                ("Pi2", &r.pi2),
                ("U", &r.u),
                ("Ubar", &r.ubar),
                ("V", &r.v),
                ("Vbar", &r.vbar),
                ("U0", &a.u0),
                ("V0", &a.v0),
                ("etabar1", &a.eta_bar1),
                ("etabar2", &a.eta_bar2),
            ] {
                run.traj(name, t)?;
            }
            Ok(if sol.gainbound_ok { Outcome::Feasible } else { Outcome::Infeasible })
        }
        Command::Simulate { mc: m, policy, particle_mode, .. } => {
            let (pu, pv) = match policy {
                PolicyChoice::Zero => (Policy::zero(sys.n_u), Policy::zero(sys.n_v)),
                PolicyChoice::Closed => {
                    let sol = synthesize(sys, gamma, &p.law, &closed_opts(delta))?;
                    (Policy::feedback(sol.control_law()), Policy::feedback(sol.disturbance_law()))
                }
                PolicyChoice::Open => {
                    let sol = openloop_solve(sys, gamma)?;
                    (Policy::feedback(sol.control_law()), Policy::feedback(sol.disturbance_law()))
                }
            };
            let (paths, seed) = mc(p, m);
            let ens = if *particle_mode {
                mcsim::simulate_particles(sys, &pu, &pv, &p.law, paths, seed)?
            } else {
                mcsim::simulate(sys, &pu, &pv, &p.law, paths, seed)?
            };
            let (j1, j2) = (Estimate::from_samples(&ens.j1), Estimate::from_samples(&ens.j2));
            run.say("j1", format!("{} ± {}", num(j1.value), num(j1.se)));
            run.say("j2", format!("{} ± {}", num(j2.value), num(j2.se)));
            run.write("ensemble.csv", &ens.to_csv())?;
            Ok(Outcome::Feasible)
        }
        Command::Verify { mc: m, perturbations, .. } => {
            let sol = synthesize(sys, gamma, &p.law, &closed_opts(delta))?;
            let (paths, seed) = mc(p, m);
            let opts = NashOptions { n_perturb: *perturbations, n_paths: paths, seed, ..NashOptions::default() };
            let rep = mcsim::verify_nash(sys, &sol, &p.law, &opts)?;
            let mut csv = String::from("player,index,eps,delta,se,passed\n");
            for pr in &rep.probes {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    pr.player,
                    pr.index,
                    num(pr.eps),
                    num(pr.delta.value),
                    num(pr.delta.se),
                    pr.passed()
                ));
            }
            run.write("nash.csv", &csv)?;
            for player in [1u8, 2] {
                if let Some(w) = rep.worst(player) {
                    run.say(
                        &format!("worst_player{player}"),
                        format!("{} ± {} (eps {})", num(w.delta.value), num(w.delta.se), w.eps),
                    );
                }
            }
            run.say("nash_passed", rep.passed());
            let id = mcsim::completion_identity(sys, &sol, &Policy::feedback(sol.disturbance_law()), &p.law, paths, seed)?;
            run.say("identity_lhs", format!("{} ± {}", num(id.lhs.value), num(id.lhs.se)));
            run.say("identity_constant", num(id.constant));
            run.say("identity_passed", id.passed());
            Ok(if rep.passed() && id.passed() { Outcome::Feasible } else { Outcome::Infeasible })
        }
        Command::Oracle { depth, tol, .. } => {
            let g = hinf_norm(sys, tol.unwrap_or(p.settings.bisect_tol), &BrlOptions::with_delta(delta))?;
            let out = TreeOutput::q_only(sys);
            let mut csv = String::from("N,gamma_tree,gamma_star,gap\n");
            for n in (2..=*depth).step_by(2) {
                let t = tree_operator_norm(sys, n, &out)?;
                csv.push_str(&format!("{n},{},{},{}\n", num(t), num(g), num((t - g).abs())));
                run.say(&format!("gamma_tree_{n}"), num(t));
            }
            run.say("gamma_star", num(g));
            run.write("oracle.csv", &csv)?;
            Ok(Outcome::Feasible)
        }
    }
}

fn closed_opts(delta: f64) -> ClosedLoopOptions {
    ClosedLoopOptions { delta1: delta, delta2: delta }
}

fn append_record(out: &Path, rec: &RunRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(out.join("runs.ndjson"))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Run one parsed command, printing its results to `stdout` and errors to
/// `stderr`. Returns the exit status.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cmd = &cli.command;
    let common = cmd.common();
    let start = Instant::now();
    if let Err(e) = fs::create_dir_all(&common.out) {
        let _ = writeln!(stderr, "error: cannot create {}: {e}", common.out.display());
        return 1;
    }
    let mut r = Run { out: &common.out, artifacts: Vec::new(), lines: Vec::new() };
    let loaded = load(&common.problem);
    let (outcome, message, settings, digest) = match &loaded {
        Err(e) => (Outcome::Error, Some(e.to_string()), SolverSettings::default(), String::new()),
        Ok(p) => {
            let res = execute(cmd, p, &mut r);
            let (o, m) = match res {
                Ok(o) => (o, None),
                Err(e) if e.is_infeasible() => (Outcome::Infeasible, Some(e.to_string())),
                Err(e) => (Outcome::Error, Some(e.to_string())),
            };
            (o, m, p.settings.clone(), p.digest.clone())
        }
    };
    for l in &r.lines {
        let _ = writeln!(stdout, "{l}");
    }
    match (&outcome, &message) {
        (Outcome::Infeasible, Some(m)) => {
            let _ = writeln!(stdout, "{m}");
        }
        (Outcome::Error, Some(m)) => {
            let _ = writeln!(stderr, "error: {m}");
        }
        _ => {}
    }
    let rec = RunRecord {
        command: cmd.name().to_string(),
        problem: common.problem.clone(),
        problem_sha256: digest,
        settings,
        wall_time_s: start.elapsed().as_secs_f64(),
        outcome,
        message,
        artifacts: r.artifacts,
    };
    if let Err(e) = append_record(&common.out, &rec) {
        let _ = writeln!(stderr, "error: cannot write run record: {e}");
        return 1;
    }
    outcome.exit_code()
}

/// Parse `args` (including the program name) and run. Usage errors exit 1.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli, &mut std::io::stdout(), &mut std::io::stderr()),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
