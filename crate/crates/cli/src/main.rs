//! Command-line front end: validate, compile, simulate, verify and analyze
//! graphs for the event-based accelerator.

mod error;
mod report;

use axonflow::compiler::{compile, CompileOptions, Mesh, NeuronType, Program};
use axonflow::memmodel::{analyze, compare, BitWidthConfig};
use axonflow::nngraph::random::{generator_kinds, random_graph, RandomGraphConfig};
use axonflow::nngraph::{count_neurons, dense_oracle, lower, Graph, LoweredGraph, Role, Shape, Tensor};
use axonflow::runtime::{RunOptions, Simulator, Stats};
use axonflow::zoo;
use clap::{Args, Parser, Subcommand, ValueEnum};
use error::Failure;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use report::{emit, Format, Mismatch};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "axonflow", version, about = "Compile and simulate CNNs on an event-based neuromorphic accelerator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
    /// Output format for reports.
    #[arg(long, global = true, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Check a graph and print its lowered size.
    Validate {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Map a graph onto cores and write the core images.
    Compile {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        target: Target,
        /// Directory for `core_X_Y.axfl` images and `mapping.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run frames through the event-driven simulator.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        run: RunArgs,
        /// Input tensor files (JSON header line + int8 payload); repeat a
        /// feature map to feed several frames.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Frames of seeded random input when no files are given.
        #[arg(long, default_value_t = 1)]
        frames: usize,
        /// Feed all-zero input instead of random values.
        #[arg(long)]
        zero: bool,
        /// Directory receiving per-frame view tensors and statistics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare simulation against the dense oracle; exit 1 on mismatch.
    Verify {
        /// Graph to check; omit to check `--random` generated graphs.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Number of random graphs.
        #[arg(long, default_value_t = 0)]
        random: usize,
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        frames: usize,
    },
    /// Memory comparison of the proposed scheme against flat and hierarchical LUTs.
    Analyze {
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Analyze a built-in network instead of a graph file.
        #[arg(long)]
        zoo: Option<String>,
        #[command(flatten)]
        target: Target,
        /// Neurons per core assumed by the hierarchical LUT.
        #[arg(long, default_value_t = 1024)]
        hier_m: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also list per-layer figures of every scheme.
        #[arg(long)]
        layers: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in network as graph JSON, or list the networks.
    Zoo {
        name: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Human-readable dump of compiled core images.
    Disasm {
        #[arg(long)]
        program: PathBuf,
        /// Only this core, as `X,Y`.
        #[arg(long)]
        core: Option<String>,
    },
}

#[derive(Args, Clone)]
struct Target {
    /// Bytes of memory per core.
    #[arg(long, default_value_t = 262_144)]
    budget: u64,
    /// Core mesh as `WxH`.
    #[arg(long, default_value = "12x12", value_parser = parse_mesh)]
    mesh: Mesh,
    #[arg(long, value_enum, default_value = "standard")]
    mode: Mode,
    /// Grow the mesh until the mapping fits.
    #[arg(long)]
    auto_mesh: bool,
}

#[derive(Args, Clone)]
struct Source {
    #[arg(long, required_unless_present = "program")]
    graph: Option<PathBuf>,
    /// Previously compiled program directory.
    #[arg(long, conflicts_with = "graph")]
    program: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    no_hit_detection: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliver each core's queued events in seeded random order.
    #[arg(long)]
    shuffle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    SigmaDelta,
}

fn parse_mesh(s: &str) -> Result<Mesh, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: u32 = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    if w == 0 || h == 0 || w > 256 || h > 256 {
        return Err("mesh sides must be within 1..=256".into());
    }
    Ok(Mesh::new(w, h))
}

impl Target {
    fn options(&self) -> Result<CompileOptions, Failure> {
        if self.budget < 8 {
            return Err(Failure::new("InvalidConfig", "budget must hold at least one 64-bit word"));
        }
        Ok(CompileOptions {
            budget_bytes: self.budget,
            mesh: self.mesh,
            auto_mesh: self.auto_mesh,
            mode: match self.mode {
                Mode::Standard => NeuronType::Standard,
                Mode::SigmaDelta => NeuronType::SigmaDelta,
            },
            cuts: BTreeMap::new(),
        })
    }
}

impl RunArgs {
    fn options(&self, salt: u64) -> RunOptions {
        RunOptions { hit_detection: !self.no_hit_detection, shuffle_seed: self.shuffle.then_some(self.seed ^ salt) }
    }
}

fn read_graph(path: &Path) -> Result<Graph, Failure> {
    Ok(Graph::from_json(&std::fs::read_to_string(path)?)?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn input_shapes(p: &Program) -> Vec<(String, Shape)> {
    p.mapping.fms.iter().filter(|f| f.role == Role::Input).map(|f| (f.id.clone(), f.shape)).collect()
}

fn random_frames(shapes: &[(String, Shape)], frames: usize, seed: u64, zero: bool) -> Vec<BTreeMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames.max(1))
        .map(|_| {
            shapes
                .iter()
                .map(|(id, s)| (id.clone(), if zero { Tensor::zeros(*s) } else { Tensor::random(*s, &mut rng) }))
                .collect()
        })
        .collect()
}

/// Group tensor files into frames: the k-th file naming a feature map feeds frame k.
fn file_frames(paths: &[PathBuf]) -> Result<Vec<BTreeMap<String, Tensor>>, Failure> {
    let mut frames: Vec<BTreeMap<String, Tensor>> = Vec::new();
    for p in paths {
        let (fm, t) = Tensor::read_from(std::fs::File::open(p)?)?;
        match frames.iter_mut().find(|f| !f.contains_key(&fm)) {
            Some(f) => {
                f.insert(fm, t);
            }
            None => frames.push(BTreeMap::from([(fm, t)])),
        }
    }
    Ok(frames)
}

fn cmd_validate(path: &Path, format: Format) -> Result<ExitCode, Failure> {
    let g = read_graph(path)?;
    let lg = lower(&g)?;
    let n = count_neurons(&lg);
    let summary = json!({
        "status": "valid",
        "name": g.name,
        "feature_maps": g.feature_maps.len(),
        "physical_feature_maps": lg.fms.len(),
        "layers": g.layers.len(),
        "neurons": n.total,
        "synapses": lg.synapses(),
    });
    emit(format, &summary, None)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_compile(path: &Path, target: &Target, out: &Path, format: Format) -> Result<ExitCode, Failure> {
    let g = read_graph(path)?;
    let lg = lower(&g)?;
    let p = compile(&lg, &target.options()?)?;
    p.save(out)?;
    let largest = p.images.iter().map(|i| i.occupancy_bytes()).max().unwrap_or(0);
    let summary = json!({
        "cores": p.images.len(),
        "mesh": format!("{}x{}", p.mapping.mesh.w, p.mapping.mesh.h),
        "fragments": p.mapping.fragments.len(),
        "total_bytes": p.total_words() * 8,
        "largest_core_bytes": largest,
        "out": out.display().to_string(),
    });
    emit(format, &summary, None)?;
    Ok(ExitCode::SUCCESS)
}

fn load_program(source: &Source, target: &Target) -> Result<Program, Failure> {
    match (&source.graph, &source.program) {
        (_, Some(dir)) => Ok(Program::load(dir)?),
        (Some(g), None) => Ok(compile(&lower(&read_graph(g)?)?, &target.options()?)?),
        (None, None) => Err(Failure::new("InvalidConfig", "either --graph or --program is required")),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    source: &Source,
    target: &Target,
    run: &RunArgs,
    inputs: &[PathBuf],
    frames: usize,
    zero: bool,
    out: Option<&Path>,
    format: Format,
) -> Result<ExitCode, Failure> {
    let p = load_program(source, target)?;
    let frames =
        if inputs.is_empty() { random_frames(&input_shapes(&p), frames, run.seed, zero) } else { file_frames(inputs)? };
    let mut sim = Simulator::new(&p, run.options(0));
    let mut per_frame: Vec<Stats> = Vec::new();
    for (k, ins) in frames.iter().enumerate() {
        let f = sim.run_frame(ins)?;
        if let Some(dir) = out {
            let fd = dir.join(format!("frame_{k}"));
            std::fs::create_dir_all(&fd)?;
            for (id, t) in &f.outputs {
                t.write_to(id, std::fs::File::create(fd.join(format!("{id}.bin")))?)?;
            }
        }
        per_frame.push(f.stats);
    }
    let report = json!({ "frames": per_frame.len(), "stats": per_frame });
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&report)?)?;
    }
    report::emit_stats(format, &per_frame)?;
    Ok(ExitCode::SUCCESS)
}

/// Compile, simulate and diff one graph; `Ok(None)` when every frame matches.
fn verify_graph(lg: &LoweredGraph, target: &Target, run: &RunArgs, frames: usize, salt: u64) -> Result<Option<Mismatch>, Failure> {
    let p = compile(lg, &target.options()?)?;
    let shapes: Vec<(String, Shape)> = lg.inputs().map(|(_, f)| (f.id.clone(), f.shape)).collect();
    let frames = random_frames(&shapes, frames, run.seed ^ salt, false);
    let mut sim = Simulator::new(&p, run.options(salt));
    for (k, ins) in frames.iter().enumerate() {
        let want = dense_oracle(lg, ins)?;
        let got = sim.run_frame(ins)?;
        for (id, t) in &want {
            if let Some((c, x, y, expected, actual)) = t.first_mismatch(&got.outputs[id]) {
                return Ok(Some(Mismatch { graph: None, frame: k, fm: id.clone(), c, x, y, expected, got: actual }));
            }
        }
    }
    Ok(None)
}

fn cmd_verify(
    graph: Option<&Path>,
    random: usize,
    target: &Target,
    run: &RunArgs,
    frames: usize,
    format: Format,
) -> Result<ExitCode, Failure> {
    let results: Vec<Result<Option<Mismatch>, Failure>> = match graph {
        Some(path) => {
            let lg = lower(&read_graph(path)?)?;
            vec![verify_graph(&lg, target, run, frames, 0)]
        }
        None if random > 0 => {
            let cfg = RandomGraphConfig { allow_nonlinear_rules: matches!(target.mode, Mode::Standard), ..Default::default() };
            let kinds = generator_kinds(&cfg);
            let mut t = target.clone();
            t.auto_mesh = true;
            (0..random)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(run.seed.wrapping_add(i as u64));
                    let g = random_graph(&mut rng, &cfg, Some(&kinds[i % kinds.len()]));
                    let lg = lower(&g)?;
                    verify_graph(&lg, &t, run, frames, i as u64).map(|m| m.map(|m| Mismatch { graph: Some(i), ..m }))
                })
                .collect()
        }
        None => return Err(Failure::new("InvalidConfig", "give --graph or --random N")),
    };
    let checked = results.len();
    let mut first = None;
    for r in results {
        if let Some(m) = r? {
            first = Some(m);
            break;
        }
    }
    let status = if first.is_none() { "PASS" } else { "FAIL" };
    let report = json!({ "status": status, "graphs": checked, "frames": frames, "first_mismatch": first });
    emit(format, &report, None)?;
    Ok(if first.is_none() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    graph: Option<&Path>,
    zoo_name: Option<&str>,
    target: &Target,
    hier_m: u64,
    seed: u64,
    layers: bool,
    out: Option<&Path>,
    format: Format,
) -> Result<ExitCode, Failure> {
    let (g, name) = match (graph, zoo_name) {
        (Some(p), None) => {
            let g = read_graph(p)?;
            let name = g.name.clone();
            (g, name)
        }
        (None, Some(n)) => (zoo::build(n, seed)?, Some(n.to_string())),
        _ => return Err(Failure::new("InvalidConfig", "give exactly one of --graph and --zoo")),
    };
    if hier_m == 0 {
        return Err(Failure::new("InvalidConfig", "--hier-m must be positive"));
    }
    let lg = lower(&g)?;
    let mut opts = target.options()?;
    opts.auto_mesh = true;
    let p = compile(&lg, &opts)?;
    let cfg = BitWidthConfig { m: hier_m, ..Default::default() };
    let reports: Vec<_> = analyze(&lg, &p, &cfg).into_values().map(|r| r.with_network(name.clone())).collect();
    let cmp = compare(&reports)?;
    let text = match format {
        Format::Json => {
            let mut v = json!({ "comparison": cmp, "cores": p.images.len() });
            if layers {
                v["reports"] = serde_json::to_value(&reports)?;
            }
            serde_json::to_string_pretty(&v)? + "\n"
        }
        Format::Csv => cmp.to_csv(),
        Format::Table => {
            let mut s = cmp.to_table();
            s.push_str(&format!("cores      {}\n", p.images.len()));
            if layers {
                for r in &reports {
                    s.push('\n');
                    s.push_str(&r.to_table());
                }
            }
            s
        }
    };
    write_or_print(out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_zoo(name: Option<&str>, seed: u64, out: Option<&Path>, format: Format) -> Result<ExitCode, Failure> {
    match name {
        Some(n) => write_or_print(out, &(zoo::build(n, seed)?.to_json() + "\n"))?,
        None => {
            let list: BTreeMap<String, String> = zoo::recipes().into_iter().map(|(k, r)| (k, r.citation)).collect();
            emit(format, &serde_json::to_value(list)?, out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_disasm(dir: &Path, core: Option<&str>) -> Result<ExitCode, Failure> {
    let p = Program::load(dir)?;
    let want = match core {
        Some(c) => {
            let (x, y) = c.split_once(',').ok_or_else(|| Failure::new("InvalidConfig", "--core expects X,Y"))?;
            let parse = |v: &str| v.trim().parse::<u8>().map_err(|_| Failure::new("InvalidConfig", format!("bad coordinate `{v}`")));
            Some((parse(x)?, parse(y)?))
        }
        None => None,
    };
    let mut found = false;
    for im in p.images.iter().filter(|im| want.is_none_or(|c| c == im.core)) {
        found = true;
        print!("{}", im.disassemble());
    }
    if !found {
        return Err(Failure::new("UnknownCore", format!("no image for core {}", core.unwrap_or(""))));
    }
    Ok(ExitCode::SUCCESS)
}

fn thread_pool() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("AXONFLOW_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::new("InvalidConfig", format!("AXONFLOW_THREADS=`{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::new("InvalidConfig", e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode, Failure> {
    thread_pool()?;
    let f = cli.format;
    match &cli.cmd {
        Command::Validate { graph } => cmd_validate(graph, f),
        Command::Compile { graph, target, out } => cmd_compile(graph, target, out, f),
        Command::Simulate { source, target, run, inputs, frames, zero, out } => {
            cmd_simulate(source, target, run, inputs, *frames, *zero, out.as_deref(), f)
        }
        Command::Verify { graph, random, target, run, frames } => cmd_verify(graph.as_deref(), *random, target, run, *frames, f),
        Command::Analyze { graph, zoo, target, hier_m, seed, layers, out } => {
            cmd_analyze(graph.as_deref(), zoo.as_deref(), target, *hier_m, *seed, *layers, out.as_deref(), f)
        }
        Command::Zoo { name, seed, out } => cmd_zoo(name.as_deref(), *seed, out.as_deref(), f),
        Command::Disasm { program, core } => cmd_disasm(program, core.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            eprintln!("{}", Failure::new("Usage", e.to_string().trim_end()).envelope());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.envelope());
            ExitCode::from(2)
        }
    }
}
