mod common;

use std::collections::BTreeSet;
use std::path::Path;

use common::{schema, ts};
use odf_core::chain::{ChainError, MergeStrategy, MetadataEvent, PollingSource, SourceFormat};
use odf_core::coordinator::{CoordinatorError, DefineOutcome, IngestOutcome, PullAction};
use odf_core::engine::EngineVersion;
use odf_core::schema::ColumnType;
use odf_core::store::ObjectSource;
use odf_core::{DatasetId, DatasetKind, Timestamp, Value, Workspace};

const SEC: i64 = 1_000;

struct Fixture {
    _dir: tempfile::TempDir,
    ws: Workspace,
    clock: i64,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::init(dir.path()).unwrap();
        Fixture { _dir: dir, ws, clock: 1_000_000 }
    }

    fn now(&mut self) -> Timestamp {
        self.clock += 1_000;
        ts(self.clock)
    }

    fn events_root(&mut self, name: &str, lateness: i64) -> DatasetId {
        let source = PollingSource {
            format: SourceFormat::Csv,
            schema: schema(&[
                ("t", ColumnType::Timestamp, false),
                ("id", ColumnType::Int64, false),
                ("k", ColumnType::String, false),
                ("v", ColumnType::Int64, false),
            ]),
            event_time_column: Some("t".into()),
            merge: MergeStrategy::Ledger { primary_key: vec!["id".into()] },
            allowed_lateness_ms: lateness as u64,
        };
        let now = self.now();
        self.ws.define_root(name, source, now).unwrap().0
    }

    /// Ingests rows `(event seconds, id, k, v)` as a full source file.
    fn ingest(&mut self, id: &DatasetId, rows: &[(i64, i64, &str, i64)]) -> IngestOutcome {
        let mut csv = String::from("t,id,k,v\n");
        for (t, i, k, v) in rows {
            csv.push_str(&format!("{},{i},{k},{v}\n", ts(t * SEC).to_rfc3339()));
        }
        let now = self.now();
        self.ws.ingest_bytes(id, csv.as_bytes(), now).unwrap()
    }

    fn derive(&mut self, name: &str, inputs: &[DatasetId], query: &str) -> DatasetId {
        let now = self.now();
        self.ws.define_derivative(name, inputs.to_vec(), query, EngineVersion::current(), now).unwrap().0
    }

    fn run(&mut self, id: &DatasetId) -> Option<odf_core::MetadataBlock> {
        let now = self.now();
        self.ws.run_transform(id, now).unwrap()
    }

    fn payloads(&self, id: &DatasetId) -> Vec<Vec<Value>> {
        self.ws.records(id).unwrap().1.into_iter().map(|r| r.payload).collect()
    }
}

fn five_rows() -> Vec<(i64, i64, &'static str, i64)> {
    vec![(1, 1, "a", 10), (2, 2, "b", 20), (3, 3, "a", 30), (12, 4, "a", 5), (14, 5, "b", 7)]
}

const TUMBLE: &str = "SELECT event_time AS w, k, SUM(v) AS s FROM events GROUP BY TUMBLE(event_time, INTERVAL '10' SECOND), k";

#[test]
fn fresh_transform_records_interval_then_noop() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    f.ingest(&root, &five_rows());
    let d = f.derive("big", &[root], "SELECT id, v FROM events WHERE v > 8");
    let block = f.run(&d).expect("block");
    let MetadataEvent::ExecuteTransform { input_slices, output_slice, .. } = &block.event else { panic!() };
    assert_eq!((input_slices[0].offset_start, input_slices[0].offset_end), (0, 5));
    assert_eq!(output_slice.as_ref().unwrap().record_count, 3);
    assert!(f.run(&d).is_none());
    assert_eq!(f.payloads(&d), vec![
        vec![Value::Int(1), Value::Int(10)],
        vec![Value::Int(2), Value::Int(20)],
        vec![Value::Int(3), Value::Int(30)],
    ]);
}

#[test]
fn watermark_only_advance_closes_window() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    f.ingest(&root, &five_rows()[..3]);
    let d = f.derive("sums", &[root], TUMBLE);
    // Watermark 3s: window [0,10) still open.
    let first = f.run(&d).unwrap();
    assert!(first.event.output_slice().is_none());
    let now = f.now();
    f.ws.set_watermark(&root, ts(10 * SEC), now).unwrap();
    let block = f.run(&d).unwrap();
    let MetadataEvent::ExecuteTransform { input_slices, output_slice, output_watermark, .. } = &block.event else {
        panic!()
    };
    assert_eq!(input_slices[0].offset_start, input_slices[0].offset_end);
    assert_eq!(output_slice.as_ref().unwrap().record_count, 2);
    assert_eq!(*output_watermark, Some(ts(10 * SEC)));
    let rows = f.payloads(&d);
    assert_eq!(rows[0], vec![Value::Timestamp(ts(0)), Value::str("a"), Value::Int(40)]);
    assert_eq!(rows[1], vec![Value::Timestamp(ts(0)), Value::str("b"), Value::Int(20)]);
}

#[test]
fn ingest_idempotence_growth_and_watermark() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 4 * SEC);
    let rows = [(7, 1, "a", 1), (2, 2, "a", 1), (5, 3, "b", 1)];
    let IngestOutcome::Appended { block, records } = f.ingest(&root, &rows) else { panic!() };
    assert_eq!(records, 3);
    assert_eq!(block.event.watermark(), Some(Some(ts(3 * SEC))));
    assert_eq!(f.ingest(&root, &rows), IngestOutcome::SourceUnchanged);
    let mut grown = rows.to_vec();
    grown.extend([(8, 4, "a", 1), (1, 5, "b", 1)]);
    let IngestOutcome::Appended { block, records } = f.ingest(&root, &grown) else { panic!() };
    assert_eq!(records, 2);
    assert_eq!(block.event.output_slice().unwrap().record_count, 2);
    assert_eq!(block.event.watermark(), Some(Some(ts(4 * SEC))));
    // Same rows in a different order: new bytes, nothing new.
    grown.reverse();
    assert_eq!(f.ingest(&root, &grown), IngestOutcome::NothingNew);
}

#[test]
fn snapshot_ingest_historizes() {
    let mut f = Fixture::new();
    let source = PollingSource {
        format: SourceFormat::Ndjson,
        schema: schema(&[("item", ColumnType::String, false), ("qty", ColumnType::Int64, false)]),
        event_time_column: None,
        merge: MergeStrategy::Snapshot { primary_key: vec!["item".into()] },
        allowed_lateness_ms: 0,
    };
    let now = f.now();
    let (id, _) = f.ws.define_root("stock", source, now).unwrap();
    let t1 = f.now();
    f.ws.ingest_bytes(&id, b"{\"item\":\"a\",\"qty\":1}\n{\"item\":\"b\",\"qty\":2}\n", t1).unwrap();
    let t2 = f.now();
    f.ws.ingest_bytes(&id, b"{\"item\":\"a\",\"qty\":5}\n{\"item\":\"c\",\"qty\":3}\n", t2).unwrap();
    let (_, records) = f.ws.records(&id).unwrap();
    let codes: Vec<String> = records.iter().map(|r| r.observed.unwrap().to_string()).collect();
    assert_eq!(codes, ["A", "A", "C", "R", "A"]);
    assert!(records[2..].iter().all(|r| r.event_time == t2 && r.system_time == t2));
}

#[test]
fn pull_orders_chain_and_diamond() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    let a = f.derive("a", &[root], "SELECT id, k, v FROM events WHERE v > 1");
    let b = f.derive("b", &[a], "SELECT id, v FROM a WHERE v > 6");
    let src = f._dir.path().join("events.csv");
    std::fs::write(&src, "t,id,k,v\n1970-01-01T00:00:01Z,1,a,10\n").unwrap();
    f.ws.set_source_path(&root, &src).unwrap();
    let now = f.now();
    let report = f.ws.pull(&b, now).unwrap();
    let order: Vec<DatasetId> = report.actions.iter().map(|(id, _, _)| *id).collect();
    assert_eq!(order, vec![root, a, b]);
    assert!(matches!(report.actions[0].2, PullAction::Ingested { records: 1, .. }));
    let now = f.now();
    assert!(f.ws.pull(&b, now).unwrap().actions.is_empty());

    // Diamond: a second branch joined back.
    let c = f.derive("c", &[root], "SELECT id, k FROM events");
    let q = "SELECT a.id, c.k FROM a JOIN c ON a.id = c.id AND c.event_time BETWEEN a.event_time AND a.event_time + INTERVAL '1' SECOND";
    let d = f.derive("d", &[a, c], q);
    let now = f.now();
    let report = f.ws.pull(&d, now).unwrap();
    let order: Vec<DatasetId> = report.actions.iter().map(|(id, _, _)| *id).collect();
    assert_eq!(order, vec![c, d]);
    let lineage = f.ws.lineage(&d).unwrap();
    assert_eq!(lineage.nodes.len(), 4);
    assert_eq!(lineage.edges.len(), 4);
    assert_eq!(f.ws.lineage(&root).unwrap().nodes.len(), 1);
}

#[test]
fn pull_reports_failure_and_skips_downstream() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    let a = f.derive("a", &[root], "SELECT id, v * 4611686018427387904 AS big FROM events");
    let b = f.derive("b", &[a], "SELECT id FROM a");
    f.ingest(&root, &[(1, 1, "a", 3)]);
    let head_before = f.ws.head(&a).unwrap();
    let now = f.now();
    let report = f.ws.pull(&b, now).unwrap();
    assert!(matches!(report.actions[0].2, PullAction::Failed(_)), "{report:?}");
    assert_eq!(report.actions[1], (b, "b".to_string(), PullAction::Skipped));
    // Transactional: the failed run left the chain untouched.
    assert_eq!(f.ws.head(&a).unwrap(), head_before);
}

#[test]
fn cycles_are_rejected() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    let a = f.derive("a", &[root], "SELECT id FROM events");
    let b = f.derive("b", &[a], "SELECT id FROM a");
    let now = f.now();
    let err = f.ws.define_derivative("a", vec![b], "SELECT id FROM b", EngineVersion::current(), now).unwrap_err();
    assert!(matches!(err, CoordinatorError::CycleDetected(_)), "{err}");
}

#[test]
fn query_must_read_its_inputs() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    let other = f.events_root("other", 0);
    let now = f.now();
    let err = f
        .ws
        .define_derivative("x", vec![root, other], "SELECT id FROM events", EngineVersion::current(), now)
        .unwrap_err();
    assert!(matches!(err, CoordinatorError::InputMismatch(_)), "{err}");
    let err = f.ws.define_derivative("x", vec![root], "SELECT id FROM nope", EngineVersion::current(), now).unwrap_err();
    assert!(matches!(err, CoordinatorError::Query(_)), "{err}");
}

#[test]
fn set_watermark_rules() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    let now = f.now();
    f.ws.set_watermark(&root, ts(50), now).unwrap();
    let err = f.ws.set_watermark(&root, ts(40), now).unwrap_err();
    assert!(matches!(err, CoordinatorError::Chain(ChainError::WatermarkRegression { .. })));
    let d = f.derive("d", &[root], "SELECT id FROM events");
    let err = f.ws.set_watermark(&d, ts(60), now).unwrap_err();
    assert!(matches!(err, CoordinatorError::Chain(ChainError::IllegalEventForKind { .. })));
}

#[test]
fn stable_references() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    let before_data = f.now();
    let r0 = f.ws.resolve_as_of(&root, before_data).unwrap();
    assert_eq!(r0.offset_bound, 0);
    f.ingest(&root, &five_rows()[..2]);
    f.ingest(&root, &five_rows());
    let now = f.now();
    let r = f.ws.resolve_as_of(&root, now).unwrap();
    assert_eq!(r.offset_bound, 5);
    let bytes = f.ws.read_ref_bytes(&r).unwrap();
    let mut more = five_rows();
    more.push((20, 6, "c", 1));
    f.ingest(&root, &more);
    assert_eq!(f.ws.resolve_as_of(&root, now).unwrap(), r);
    assert_eq!(f.ws.read_ref_bytes(&r).unwrap(), bytes);
    assert_eq!(f.ws.read_ref_bytes(&r0).unwrap(), Vec::<u8>::new());
}

#[test]
fn reproducibility_across_two_eras() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    let d = f.derive("d", &[root], TUMBLE);
    f.ingest(&root, &five_rows()[..3]);
    f.run(&d);
    f.ingest(&root, &five_rows());
    f.run(&d);
    // Compatible change (filter only): state carries.
    let q2 = "SELECT event_time AS w, k, SUM(v) AS s FROM events WHERE v > 6 GROUP BY TUMBLE(event_time, INTERVAL '10' SECOND), k";
    f.derive("d", &[root], q2);
    f.ingest(&root, &[(21, 6, "a", 9), (33, 7, "b", 8)]);
    let carried = f.run(&d).unwrap();
    assert!(matches!(carried.event, MetadataEvent::ExecuteTransform { prior_checkpoint: Some(_), .. }));
    // Incompatible change (window size): reset.
    f.derive("d", &[root], &TUMBLE.replace("'10'", "'20'"));
    f.ingest(&root, &[(41, 8, "a", 1), (62, 9, "a", 1)]);
    let reset = f.run(&d).unwrap();
    assert!(matches!(reset.event, MetadataEvent::ExecuteTransform { prior_checkpoint: None, .. }));

    let report = f.ws.verify_reproducibility(&d).unwrap();
    assert!(report.is_valid(), "{report:?}");
    assert_eq!(report.blocks_verified, 4);
}

#[test]
fn forged_output_is_caught() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    f.ingest(&root, &five_rows());
    let d = f.derive("d", &[root], "SELECT id, v FROM events WHERE v > 8");
    f.run(&d);
    // Rewrite the chain with a plausible but different output slice.
    let chain = f.ws.chain(&d).unwrap();
    let last = chain.head().unwrap().clone();
    let MetadataEvent::ExecuteTransform { input_slices, prior_checkpoint, new_checkpoint, output_slice, output_watermark, late_records_ignored } = last.event else { panic!() };
    let (schema_, mut records) = f.ws.records(&d).unwrap();
    records[1].payload[1] = Value::Int(21);
    let forged = odf_core::slices::write_slice(f.ws.store(), &records, &schema_, 0).unwrap();
    assert_ne!(Some(&forged), output_slice.as_ref());
    let mut rewritten = chain.prefix(chain.len() - 1);
    let event = MetadataEvent::ExecuteTransform {
        input_slices,
        prior_checkpoint,
        new_checkpoint,
        output_slice: Some(forged),
        output_watermark,
        late_records_ignored,
    };
    let block = rewritten.append(f.ws.store(), event, last.system_time).unwrap().clone();
    f.ws.set_head(&d, &block.block_hash).unwrap();
    assert!(f.ws.verify_integrity(&d, false).unwrap()[0].1.is_valid());
    let report = f.ws.verify_reproducibility(&d).unwrap();
    assert_eq!(report.divergence.unwrap().sequence_number, block.sequence_number);
}

#[test]
fn nullable_extension_carries_join_state() {
    let mut f = Fixture::new();
    let left = f.events_root("events", 0);
    let right = f.events_root("other", 0);
    let q = "SELECT e.id, o.v FROM events AS e JOIN other AS o ON e.k = o.k AND o.event_time BETWEEN e.event_time AND e.event_time + INTERVAL '5' SECOND";
    let d = f.derive("pairs", &[left, right], q);
    f.ingest(&left, &[(1, 1, "a", 1), (2, 2, "b", 1)]);
    f.ingest(&right, &[(1, 1, "z", 1)]);
    f.run(&d);
    // Add a nullable column to the right source.
    let mut src = f.ws.chain(&right).unwrap().state().polling_source.clone().unwrap();
    src.schema.columns.push(odf_core::Column::new("note", ColumnType::String, true));
    let now = f.now();
    assert_eq!(f.ws.define_root("other", src, now).unwrap().1, DefineOutcome::Updated);
    let csv = format!(
        "t,id,k,v,note\n{},1,z,1,\n{},2,a,7,hi\n",
        ts(SEC).to_rfc3339(),
        ts(3 * SEC).to_rfc3339()
    );
    let now = f.now();
    f.ws.ingest_bytes(&right, csv.as_bytes(), now).unwrap();
    let block = f.run(&d).unwrap();
    assert!(matches!(block.event, MetadataEvent::ExecuteTransform { prior_checkpoint: Some(_), .. }));
    let now = f.now();
    f.ws.set_watermark(&right, Timestamp::MAX, now).unwrap();
    f.ws.set_watermark(&left, Timestamp::MAX, now).unwrap();
    f.run(&d);
    assert_eq!(f.payloads(&d), vec![vec![Value::Int(1), Value::Int(7)]]);
    assert!(f.ws.verify_reproducibility(&d).unwrap().is_valid());
}

#[test]
fn trace_examples() {
    let mut f = Fixture::new();
    let root = f.events_root("events", 0);
    f.ingest(&root, &five_rows());
    let leaf = f.ws.trace(&root, 3).unwrap();
    assert_eq!(leaf.offsets, BTreeSet::from([3]));
    assert!(leaf.children.is_empty());
    assert!(matches!(f.ws.trace(&root, 9), Err(CoordinatorError::OffsetNotFound { .. })));

    let filter = f.derive("filter", &[root], "SELECT id, v FROM events WHERE v > 8");
    f.run(&filter);
    for (out, src) in [(0, 0), (1, 1), (2, 2)] {
        let t = f.ws.trace(&filter, out).unwrap();
        assert_eq!(t.children.len(), 1);
        assert_eq!(t.children[0].offsets, BTreeSet::from([src]));
    }

    let sums = f.derive("sums", &[root], TUMBLE);
    let now = f.now();
    f.ws.set_watermark(&root, ts(20 * SEC), now).unwrap();
    f.run(&sums);
    let (_, outs) = f.ws.records(&sums).unwrap();
    let (_, ins) = f.ws.records(&root).unwrap();
    for out in &outs {
        let t = f.ws.trace(&sums, out.offset).unwrap();
        let expected: BTreeSet<u64> = ins
            .iter()
            .filter(|r| r.event_time.millis().div_euclid(10 * SEC) * 10 * SEC == out.event_time.millis())
            .filter(|r| r.payload[2] == out.payload[1])
            .map(|r| r.offset)
            .collect();
        assert_eq!(t.children[0].offsets, expected);
        assert!(f.ws.check_provenance(&sums, out.offset).unwrap());
    }
}

#[test]
fn transience_rebuilds_identical_objects() {
    let mut c = common::corpus::build(7, 1);
    let before: Vec<(DatasetId, Vec<u8>)> = c
        .derivatives
        .iter()
        .map(|d| {
            let r = c.ws.resolve_as_of(d, Timestamp::MAX).unwrap();
            (*d, c.ws.read_ref_bytes(&r).unwrap())
        })
        .collect();
    // Identical slices are one object; keep anything a root also references.
    let root_objects: BTreeSet<_> = c
        .roots
        .iter()
        .flat_map(|r| c.ws.chain(r).unwrap().blocks().iter().filter_map(|b| b.event.output_slice().map(|s| s.slice_hash)).collect::<Vec<_>>())
        .collect();
    let mut removed = 0;
    for d in &c.derivatives {
        for b in c.ws.chain(d).unwrap().blocks() {
            if let MetadataEvent::ExecuteTransform { output_slice, new_checkpoint, .. } = &b.event {
                for h in output_slice.iter().map(|s| s.slice_hash).chain(*new_checkpoint) {
                    if root_objects.contains(&h) {
                        continue;
                    }
                    removed += c.ws.store().remove(&h).unwrap() as u32;
                }
            }
        }
    }
    assert!(removed > 0);
    let now = c.tick();
    for leaf in c.leaves.clone() {
        let report = c.ws.pull(&leaf, now).unwrap();
        assert!(report.is_success(), "{report:?}");
    }
    for (d, bytes) in before {
        for b in c.ws.chain(&d).unwrap().blocks() {
            if let MetadataEvent::ExecuteTransform { new_checkpoint: Some(cp), .. } = &b.event {
                assert!(c.ws.store().contains(cp));
            }
        }
        let r = c.ws.resolve_as_of(&d, Timestamp::MAX).unwrap();
        assert_eq!(c.ws.read_ref_bytes(&r).unwrap(), bytes);
    }
}

#[test]
fn corpus_is_valid_and_reproducible() {
    let c = common::corpus::build(11, 2);
    for id in c.all() {
        let chain = c.ws.chain(&id).unwrap();
        assert!(chain.len() >= 5, "{} has {} blocks", c.ws.label(&id), chain.len());
        for (_, report) in c.ws.verify_integrity(&id, true).unwrap() {
            assert!(report.is_valid(), "{report:?}");
        }
        if chain.state().kind == Some(DatasetKind::Derivative) {
            let r = c.ws.verify_reproducibility(&id).unwrap();
            assert!(r.is_valid(), "{}: {r:?}", c.ws.label(&id));
        }
    }
    // Lineage edges equal those found by scanning every chain.
    let busy = c.id("busy_days");
    let lineage = c.ws.lineage(&busy).unwrap();
    let mut scanned = Vec::new();
    for id in c.all() {
        if let Some(t) = &c.ws.chain(&id).unwrap().state().transform {
            for i in &t.inputs {
                if lineage.nodes.iter().any(|n| n.dataset_id == id) {
                    scanned.push((*i, id));
                }
            }
        }
    }
    let mut edges = lineage.edges.clone();
    edges.sort();
    scanned.sort();
    assert_eq!(edges, scanned);
}

#[test]
fn workspace_discovery_and_names() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Workspace::open(dir.path()), Err(CoordinatorError::NotAWorkspace(_))));
    Workspace::init(dir.path()).unwrap();
    assert!(matches!(Workspace::init(dir.path()), Err(CoordinatorError::AlreadyInitialized(_))));
    let nested = dir.path().join("a/b");
    std::fs::create_dir_all(&nested).unwrap();
    let ws = Workspace::discover(&nested).unwrap();
    assert_eq!(ws.root(), dir.path());
    assert!(matches!(ws.resolve("nope"), Err(CoordinatorError::UnknownDataset(_))));
    let _ = Path::new("");
}
