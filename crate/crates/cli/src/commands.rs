use std::fmt::Write as _;
use std::path::Path;

use lutkv::codebook::{self, serialize_rom, Codebook, DEFAULT_TOL};
use lutkv::counter::{Category, OpCounter};
use lutkv::evalkit::{
    evaluate_pipeline, generate_keys, jensen_bias_probe, sensitivity_sweep, ErrorReport,
    JensenReport, LayerProfile, SweepReport, SyntheticSpec,
};
use lutkv::formats::{encode_sign_rom, KvCacheFile, KVQ_HEADER_LEN, SGN_HEADER_LEN};
use lutkv::matrix::Matrix;
use lutkv::read_path::{score_sequence, score_sequence_fp16};
use lutkv::reference::score_sequence_reference;
use lutkv::signopt::{norm_ratio_diagnostic, select_signs_all_layers, CalibrationSet, NormDiagnostic};
use lutkv::transform::{random_signs, serialize_signs, RotationSpec, SignVector};
use lutkv::write_path::{packed_len, quantize_key_with, ComparatorMode};
use lutkv::{Error, Result};
use serde::Serialize;

use crate::artifacts::*;
use crate::{
    BenchArgs, Comparator, DiagnoseArgs, EvalArgs, GenSignsArgs, Mode, OptimizeSignsArgs,
    QuantizeArgs, SimulateArgs, SolveCodebookArgs,
};

const SCHEMA_VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Serialize)]
struct CodebookReport<'a> {
    schema: &'static str,
    version: u32,
    d: usize,
    b: u8,
    tol: f64,
    lloyd_residual: f64,
    max_residual: f64,
    distortion: f64,
    centroids: &'a [f64],
    boundaries: &'a [f64],
    rom: String,
    rom_bytes: usize,
}

pub fn solve_codebook(a: SolveCodebookArgs) -> Result<()> {
    check_output(&a.out)?;
    let cb = codebook::solve_codebook(a.d, a.b, a.tol)?;
    let rom = serialize_rom(&cb);
    write(&a.out, &rom)?;
    let side = CodebookSidecar {
        d: cb.dim(),
        b: cb.bits(),
        centroids: cb.centroids().to_vec(),
        boundaries: cb.boundaries().to_vec(),
        lloyd_residual: cb.lloyd_residual(),
        max_residual: cb.max_residual(),
    };
    emit_json(&side, Some(&sidecar_path(&a.out)))?;
    emit_json(
        &CodebookReport {
            schema: "lutkv.codebook",
            version: SCHEMA_VERSION,
            d: cb.dim(),
            b: cb.bits(),
            tol: a.tol,
            lloyd_residual: cb.lloyd_residual(),
            max_residual: cb.max_residual(),
            distortion: cb.distortion(),
            centroids: cb.centroids(),
            boundaries: cb.boundaries(),
            rom: hex(&rom),
            rom_bytes: rom.len(),
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct SignLayerReport {
    layer_id: u32,
    seed: u64,
    signs: String,
}

#[derive(Serialize)]
struct SignsReport {
    schema: &'static str,
    version: u32,
    d: usize,
    layers: Vec<SignLayerReport>,
    payload_bytes: usize,
    file_bytes: usize,
}

pub fn gen_signs(a: GenSignsArgs) -> Result<()> {
    check_output(&a.out)?;
    if a.layers == 0 {
        return Err(Error::InvalidInput("--layers must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..a.layers as u64).map(|l| a.seed.wrapping_add(l)).collect();
    let signs: Vec<SignVector> = seeds
        .iter()
        .enumerate()
        .map(|(l, &s)| {
            // Rejects a d the transform cannot handle.
            let spec = RotationSpec::new(random_signs(a.d, s))?;
            Ok(spec.sign().clone().with_layer_id(l as u32))
        })
        .collect::<Result<_>>()?;
    let rom = encode_sign_rom(&signs)?;
    write(&a.out, &rom)?;
    let layers = signs
        .iter()
        .zip(&seeds)
        .map(|(s, &seed)| SignLayerReport {
            layer_id: s.layer_id(),
            seed,
            signs: hex(&serialize_signs(s)),
        })
        .collect();
    emit_json(
        &SignsReport {
            schema: "lutkv.signs",
            version: SCHEMA_VERSION,
            d: a.d,
            layers,
            payload_bytes: rom.len() - SGN_HEADER_LEN,
            file_bytes: rom.len(),
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct SearchLayerReport {
    layer_id: u32,
    source: String,
    calibration_rows: usize,
    dropped_rows: usize,
    selected_seed: u64,
    best_mse: f64,
    worst_mse: f64,
    spread: f64,
    signs: String,
    candidate_seeds: Vec<u64>,
    candidate_mse: Vec<f64>,
}

#[derive(Serialize)]
struct OptimizeReport {
    schema: &'static str,
    version: u32,
    d: usize,
    b: u8,
    candidates: usize,
    base_seed: u64,
    layers: Vec<SearchLayerReport>,
    payload_bytes: usize,
    file_bytes: usize,
}

pub fn optimize_signs(a: OptimizeSignsArgs) -> Result<()> {
    check_output(&a.out)?;
    if let Some(r) = &a.report {
        check_output(r)?;
    }
    let layers = load_layers(&a.keys, a.d)?;
    let sel = select_signs_all_layers(&layers, a.candidates, a.b, a.base_seed)?;
    write(&a.out, &sel.rom)?;
    let reports = sel
        .reports
        .iter()
        .zip(&layers)
        .map(|(r, l)| SearchLayerReport {
            layer_id: r.layer_id,
            source: l.source().to_string(),
            calibration_rows: r.calibration_rows,
            dropped_rows: r.dropped_rows,
            selected_seed: r.selected_seed,
            best_mse: r.best_mse,
            worst_mse: r.worst_mse,
            spread: r.spread,
            signs: hex(&serialize_signs(&r.selected_signs)),
            candidate_seeds: r.candidate_seeds.clone(),
            candidate_mse: r.candidate_mse.clone(),
        })
        .collect();
    emit_json(
        &OptimizeReport {
            schema: "lutkv.optimize_signs",
            version: SCHEMA_VERSION,
            d: layers[0].dim(),
            b: a.b,
            candidates: a.candidates,
            base_seed: a.base_seed,
            layers: reports,
            payload_bytes: sel.payload_len(),
            file_bytes: sel.rom.len(),
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct QuantizeReport {
    schema: &'static str,
    version: u32,
    d: usize,
    b: u8,
    layer_id: u32,
    keys: usize,
    record_bytes: usize,
    header_bytes: usize,
    file_bytes: usize,
    fp16_bytes: usize,
    compression_ratio: f64,
    operations: OpCounter,
}

fn resolve_codebook(path: Option<&Path>, d: usize, b: Option<u8>) -> Result<Codebook> {
    match path {
        Some(p) => load_codebook(p, Some(d), b),
        None => {
            let b = b.ok_or_else(|| Error::InvalidInput("pass --b or --codebook".into()))?;
            codebook::solve_codebook(d, b, DEFAULT_TOL)
        }
    }
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    check_output(&a.out)?;
    check_input(&a.keys)?;
    let mut d = a.d;
    let signs = match &a.signs {
        Some(p) => {
            let rom = load_signs(p)?;
            let s = pick_layer(&rom, a.layer, p)?;
            d = agree(d, Some(s.dim()), &p.display().to_string())?;
            Some(s)
        }
        None => None,
    };
    let keys = load_matrix(&a.keys, d)?;
    let d = match d {
        Some(d) => d,
        None if !keys.is_empty() => keys.dim(),
        None => return Err(Error::InvalidInput("empty key file; pass --d".into())),
    };
    let signs = match (signs, a.seed) {
        (Some(s), _) => s,
        (None, Some(seed)) => random_signs(d, seed),
        (None, None) => return Err(Error::InvalidInput("pass --signs or --seed".into())),
    };
    let spec = RotationSpec::new(signs)?;
    let cb = resolve_codebook(a.codebook.as_deref(), d, a.b)?;
    let mode = match a.comparator {
        Comparator::Flat => ComparatorMode::Flat,
        Comparator::BinarySearch => ComparatorMode::BinarySearch,
    };
    let mut ops = OpCounter::new();
    let quantized = keys
        .rows()
        .map(|k| quantize_key_with(k, &spec, &cb, mode, &mut ops))
        .collect::<Result<Vec<_>>>()?;
    let file = KvCacheFile {
        d,
        bits: cb.bits(),
        layer_id: a.layer_id.unwrap_or(a.layer),
        keys: quantized,
    };
    let bytes = file.to_bytes()?;
    write(&a.out, &bytes)?;
    let record = packed_len(d, cb.bits());
    emit_json(
        &QuantizeReport {
            schema: "lutkv.quantize",
            version: SCHEMA_VERSION,
            d,
            b: cb.bits(),
            layer_id: file.layer_id,
            keys: file.keys.len(),
            record_bytes: record,
            header_bytes: KVQ_HEADER_LEN,
            file_bytes: bytes.len(),
            fp16_bytes: 2 * d,
            compression_ratio: (2 * d) as f64 / record as f64,
            operations: ops,
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct Multiplications {
    lookup_path: u64,
    reference_path: u64,
    ratio: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    schema: &'static str,
    version: u32,
    mode: &'static str,
    d: usize,
    b: u8,
    layer_id: u32,
    keys: usize,
    queries: usize,
    /// scores[query][key]; fp16 values are exact conversions of the halves.
    scores: Vec<Vec<f64>>,
    saturated: usize,
    /// Totals over all queries.
    lookup_ops: OpCounter,
    reference_ops: OpCounter,
    /// Per query.
    multiplications: Multiplications,
    max_abs_diff_vs_reference: f64,
}

/// Table+score multiplications for the lookup path, score-category ones
/// for the reference dot products.
fn lookup_mults(c: &OpCounter) -> u64 {
    c.multiplications_in(&[Category::Table, Category::Score])
}

pub fn simulate_attention(a: SimulateArgs) -> Result<()> {
    if let Some(r) = &a.report {
        check_output(r)?;
    }
    let cache = load_cache(&a.cache)?;
    let (d, b) = (cache.d, cache.bits);
    let layer = a.layer.unwrap_or(cache.layer_id);
    let signs = resolve_signs(a.signs.as_deref(), layer, a.seed, Some(d))?;
    let spec = RotationSpec::new(signs)?;
    let cb = resolve_codebook(a.codebook.as_deref(), d, Some(b))?;
    let queries = load_matrix(&a.query, Some(d))?;
    if queries.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no queries", a.query.display())));
    }

    let mut lookup_ops = OpCounter::new();
    let mut reference_ops = OpCounter::new();
    let mut scores = Vec::with_capacity(queries.n_rows());
    let mut saturated = 0;
    let mut max_diff = 0.0f64;
    let mut per_query = None;
    for q in queries.rows() {
        let (row, ops) = match a.mode {
            Mode::Double => score_sequence(q, &cache.keys, &spec, &cb)?,
            Mode::Fp16 => {
                let (hs, ops) = score_sequence_fp16(q, &cache.keys, &spec, &cb)?;
                saturated += hs.iter().filter(|h| h.saturated).count();
                (hs.iter().map(|h| h.to_f64()).collect(), ops)
            }
        };
        let (exact, rops) = score_sequence_reference(q, &cache.keys, &spec, &cb)?;
        for (s, e) in row.iter().zip(&exact) {
            max_diff = max_diff.max((s - e).abs());
        }
        per_query.get_or_insert((lookup_mults(&ops), rops.get(Category::Score).multiplications));
        lookup_ops += &ops;
        reference_ops += &rops;
        scores.push(row);
    }
    let (lookup, reference) = per_query.unwrap_or((0, 0));
    emit_json(
        &SimulateReport {
            schema: "lutkv.simulate_attention",
            version: SCHEMA_VERSION,
            mode: match a.mode {
                Mode::Double => "double",
                Mode::Fp16 => "fp16",
            },
            d,
            b,
            layer_id: cache.layer_id,
            keys: cache.keys.len(),
            queries: queries.n_rows(),
            scores,
            saturated,
            lookup_ops,
            reference_ops,
            multiplications: Multiplications {
                lookup_path: lookup,
                reference_path: reference,
                ratio: reference as f64 / lookup as f64,
            },
            max_abs_diff_vs_reference: max_diff,
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct BenchReport {
    schema: &'static str,
    version: u32,
    d: usize,
    b: u8,
    t: usize,
    seed: u64,
    table_multiplications: u64,
    score_multiplications: u64,
    lookup_path: u64,
    reference_path: u64,
    ratio: f64,
    lookup_ops: OpCounter,
    reference_ops: OpCounter,
}

fn gaussian_rows(d: usize, n: usize, seed: u64) -> Result<Matrix> {
    let spec = SyntheticSpec {
        d,
        n,
        layers: vec![LayerProfile::homogeneous(1.0)],
        seed,
    };
    Ok(generate_keys(&spec)?.remove(0).keys().clone())
}

pub fn bench_mults(a: BenchArgs) -> Result<()> {
    if let Some(r) = &a.report {
        check_output(r)?;
    }
    let cb = codebook::solve_codebook(a.d, a.b, DEFAULT_TOL)?;
    let spec = RotationSpec::new(random_signs(a.d, a.seed))?;
    let mut write_ops = OpCounter::new();
    let cache = if a.t == 0 {
        Vec::new()
    } else {
        gaussian_rows(a.d, a.t, a.seed)?
            .rows()
            .map(|k| quantize_key_with(k, &spec, &cb, ComparatorMode::BinarySearch, &mut write_ops))
            .collect::<Result<Vec<_>>>()?
    };
    let query = gaussian_rows(a.d, 1, a.seed.wrapping_add(1))?;
    let q = query.row(0);
    let (_, lookup_ops) = score_sequence(q, &cache, &spec, &cb)?;
    let (_, reference_ops) = score_sequence_reference(q, &cache, &spec, &cb)?;
    let lookup = lookup_mults(&lookup_ops);
    let reference = reference_ops.get(Category::Score).multiplications;
    let ratio = reference as f64 / lookup as f64;
    println!(
        "lookup path: {lookup} multiplications (table {} + score {})",
        lookup_ops.get(Category::Table).multiplications,
        lookup_ops.get(Category::Score).multiplications
    );
    println!("reference path: {reference} multiplications");
    println!("{lookup} vs {reference}, ratio {ratio}");
    match &a.report {
        Some(p) => emit_json(
            &BenchReport {
                schema: "lutkv.bench_mults",
                version: SCHEMA_VERSION,
                d: a.d,
                b: a.b,
                t: a.t,
                seed: a.seed,
                table_multiplications: lookup_ops.get(Category::Table).multiplications,
                score_multiplications: lookup_ops.get(Category::Score).multiplications,
                lookup_path: lookup,
                reference_path: reference,
                ratio,
                lookup_ops,
                reference_ops,
            },
            Some(p),
        ),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct EvalLayer {
    layer_id: u32,
    source: String,
    rows: usize,
    mean_norm: f64,
    pipeline: Vec<ErrorReport>,
    sweep: SweepReport,
}

#[derive(Serialize)]
struct EvalReport {
    schema: &'static str,
    version: u32,
    source: &'static str,
    synthetic: Option<SyntheticSpec>,
    d: usize,
    bits: Vec<u8>,
    seeds: Vec<u64>,
    pipeline_seed: u64,
    queries: usize,
    query_seed: u64,
    layers: Vec<EvalLayer>,
    norms: NormDiagnostic,
    jensen: Vec<JensenReport>,
}

/// Scores for the bias probe: the first query against up to 64 keys of the
/// first layer, at attention temperature 1/√d.
fn probe_scores(layer: &CalibrationSet, q: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (q.len() as f64).sqrt();
    layer
        .keys()
        .rows()
        .take(64)
        .map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * inv)
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    for p in a.report.iter().chain(&a.csv) {
        check_output(p)?;
    }
    if a.b.is_empty() || a.seeds.is_empty() {
        return Err(Error::InvalidInput("--b and --seeds must be non-empty".into()));
    }
    let (source, synthetic, layers) = match &a.synthetic {
        Some(p) => {
            check_input(p)?;
            let spec: SyntheticSpec = serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            if let Some(d) = a.d {
                agree(Some(d), Some(spec.d), &p.display().to_string())?;
            }
            let layers = generate_keys(&spec)?;
            ("synthetic", Some(spec), layers)
        }
        None => ("keys", None, load_layers(&a.keys, a.d)?),
    };
    let d = layers[0].dim();
    let queries = gaussian_rows(d, a.queries.max(1), a.query_seed)?;
    let pipeline_seed = a.seeds[0];
    let spec = RotationSpec::new(random_signs(d, pipeline_seed))?;
    let codebooks = a
        .b
        .iter()
        .map(|&b| codebook::solve_codebook(d, b, DEFAULT_TOL))
        .collect::<Result<Vec<_>>>()?;

    let mut out_layers = Vec::with_capacity(layers.len());
    for l in &layers {
        let pipeline = codebooks
            .iter()
            .map(|cb| evaluate_pipeline(l.keys(), &queries, &spec, cb))
            .collect::<Result<Vec<_>>>()?;
        out_layers.push(EvalLayer {
            layer_id: l.layer_id(),
            source: l.source().to_string(),
            rows: l.keys().n_rows(),
            mean_norm: l.mean_norm(),
            pipeline,
            sweep: sensitivity_sweep(l, &a.seeds, &a.b)?,
        });
    }
    let scores = probe_scores(&layers[0], queries.row(0));
    let jensen = a
        .jensen_sigmas
        .iter()
        .map(|&s| jensen_bias_probe(&scores, s, a.jensen_trials, a.query_seed))
        .collect::<Result<Vec<_>>>()?;

    if let Some(p) = &a.csv {
        let mut csv = String::from("layer,seed,bits,mse\n");
        for l in &out_layers {
            for (si, seed) in l.sweep.seeds.iter().enumerate() {
                for (bi, b) in l.sweep.bits.iter().enumerate() {
                    let _ = writeln!(csv, "{},{seed},{b},{:e}", l.layer_id, l.sweep.mse[si][bi]);
                }
            }
        }
        write(p, csv.as_bytes())?;
    }
    emit_json(
        &EvalReport {
            schema: "lutkv.eval",
            version: SCHEMA_VERSION,
            source,
            synthetic,
            d,
            bits: a.b.clone(),
            seeds: a.seeds.clone(),
            pipeline_seed,
            queries: queries.n_rows(),
            query_seed: a.query_seed,
            norms: norm_ratio_diagnostic(&layers)?,
            layers: out_layers,
            jensen,
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct DiagnoseReport {
    schema: &'static str,
    version: u32,
    sources: Vec<String>,
    #[serde(flatten)]
    diagnostic: NormDiagnostic,
}

pub fn diagnose_norms(a: DiagnoseArgs) -> Result<()> {
    if let Some(r) = &a.report {
        check_output(r)?;
    }
    let layers = load_layers(&a.keys, a.d)?;
    emit_json(
        &DiagnoseReport {
            schema: "lutkv.diagnose_norms",
            version: SCHEMA_VERSION,
            sources: layers.iter().map(|l| l.source().to_string()).collect(),
            diagnostic: norm_ratio_diagnostic(&layers)?,
        },
        a.report.as_deref(),
    )
}
