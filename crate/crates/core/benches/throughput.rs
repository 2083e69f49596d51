//! Sequential vs rayon throughput of the batch paths: slice encoding and
//! decoding, stateless transforms, and full chain validation.
//!
//! Build with `--no-default-features` to measure the sequential-only build;
//! both arms then run on the calling thread.

use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use odf_core::chain::{validate, MergeStrategy, PollingSource, SourceFormat, ValidateOptions};
use odf_core::dsl::{compile, InputDef};
use odf_core::engine::{execute, InputBatch, TransformRequest};
use odf_core::par::Parallelism;
use odf_core::slices::{decode_slice, encode_slice};
use odf_core::{Column, ColumnType, Record, SchemaDef, Timestamp, Value, Workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn schema() -> SchemaDef {
    SchemaDef::new(vec![
        Column::new("k", ColumnType::String, false),
        Column::new("v", ColumnType::Int64, true),
        Column::new("x", ColumnType::Float64, false),
    ])
    .unwrap()
}

fn records(n: usize) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let v = if rng.gen_bool(0.1) { Value::Null } else { Value::Int(rng.gen_range(-50..50)) };
            Record {
                offset: i as u64,
                system_time: Timestamp::EPOCH,
                event_time: Timestamp::from_millis(i as i64 * 10).unwrap(),
                observed: None,
                payload: vec![Value::str(format!("key-{}", rng.gen_range(0..100))), v, Value::Float(rng.gen_range(0.0..100.0))],
            }
        })
        .collect()
}

fn slices(c: &mut Criterion) {
    let schema = schema();
    let mut group = c.benchmark_group("slice");
    for n in [10_000, 100_000] {
        let recs = records(n);
        let bytes = encode_slice(&recs, &schema, 0, Parallelism::Sequential).unwrap();
        group.throughput(Throughput::Elements(n as u64));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(format!("encode/{name}"), n), &recs, |b, recs| {
                b.iter(|| encode_slice(black_box(recs), &schema, 0, mode).unwrap())
            });
            group.bench_with_input(BenchmarkId::new(format!("decode/{name}"), n), &bytes, |b, bytes| {
                b.iter(|| decode_slice(black_box(bytes), &schema, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn stateless(c: &mut Criterion) {
    let inputs = BTreeMap::from([("t".to_string(), InputDef { schema: schema(), event_time_column: None })]);
    let plan = compile("SELECT k, v * 3 + 1 AS w, x / 2.0 AS h FROM t WHERE v IS NULL OR (v > -20 AND x < 80.0)", &inputs).unwrap();
    let recs = records(100_000);
    let mut group = c.benchmark_group("stateless");
    group.throughput(Throughput::Elements(recs.len() as u64));
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                execute(TransformRequest {
                    plan: &plan,
                    inputs: vec![InputBatch { records: recs.clone(), watermark: None }],
                    prior: None,
                    tracking: false,
                    parallelism: mode,
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

fn validation(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::init(dir.path()).unwrap();
    let source = PollingSource {
        format: SourceFormat::Csv,
        schema: SchemaDef::new(vec![
            Column::new("t", ColumnType::Timestamp, false),
            Column::new("id", ColumnType::Int64, false),
            Column::new("note", ColumnType::String, false),
        ])
        .unwrap(),
        event_time_column: Some("t".into()),
        merge: MergeStrategy::Ledger { primary_key: vec!["id".into()] },
        allowed_lateness_ms: 0,
    };
    let t0 = Timestamp::from_millis(1_700_000_000_000).unwrap();
    let (id, _) = ws.define_root("events", source, t0).unwrap();
    let mut csv = String::from("t,id,note\n");
    for round in 0..48 {
        for i in 0..1_000 {
            let n = round * 1_000 + i;
            csv.push_str(&format!("{},{n},row {n} of round {round}\n", Timestamp::from_millis(n * 1_000).unwrap()));
        }
        ws.ingest_bytes(&id, csv.as_bytes(), t0.saturating_add_ms(round + 1)).unwrap();
    }
    let head = ws.head(&id).unwrap().unwrap();

    let mut group = c.benchmark_group("validate");
    group.sample_size(20);
    for (name, mode) in MODES {
        let opts = ValidateOptions { parallelism: mode, ..Default::default() };
        group.bench_function(name, |b| {
            b.iter(|| {
                let r = validate(ws.store(), &head, opts);
                assert!(r.is_valid());
                r
            })
        });
    }
    group.finish();
}

criterion_group!(benches, slices, stateless, validation);
criterion_main!(benches);
