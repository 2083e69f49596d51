//! A generated workspace: several groups of root and derivative datasets
//! grown over randomized ingest/pull rounds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use odf_core::chain::{MergeStrategy, PollingSource, SourceFormat};
use odf_core::engine::EngineVersion;
use odf_core::schema::ColumnType;
use odf_core::{DatasetId, Timestamp, Workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use super::{schema, ts, DAY};

const MINUTE: i64 = 60_000;
/// 2024-01-01T00:00:00Z
pub const EVENT_EPOCH: i64 = 1_704_067_200_000;
/// 2025-01-01T00:00:00Z
pub const CLOCK_EPOCH: i64 = 1_735_689_600_000;

fn iso(ms: i64) -> String {
    ts(ms).to_rfc3339()
}

struct Group {
    g: usize,
    orders: Vec<(i64, i64)>,
    shipments: Vec<(i64, i64, i64)>,
    sales: Vec<(i64, i64, &'static str, i64, Option<&'static str>)>,
    inventory: Vec<(String, i64)>,
    next_order: i64,
    next_sale: i64,
    sales_extended: bool,
}

pub struct Corpus {
    pub dir: TempDir,
    pub ws: Workspace,
    pub rng: ChaCha8Rng,
    pub clock: i64,
    pub roots: Vec<DatasetId>,
    pub derivatives: Vec<DatasetId>,
    /// Derivatives nobody reads; pulling these touches everything.
    pub leaves: Vec<DatasetId>,
    groups: Vec<Group>,
}

impl Corpus {
    pub fn all(&self) -> Vec<DatasetId> {
        self.roots.iter().chain(&self.derivatives).copied().collect()
    }

    pub fn src_dir(&self) -> PathBuf {
        self.dir.path().join("sources")
    }

    pub fn tick(&mut self) -> Timestamp {
        self.clock += MINUTE;
        ts(self.clock)
    }

    pub fn id(&self, name: &str) -> DatasetId {
        self.ws.resolve(name).unwrap()
    }

    /// One round of new source data in every group followed by a pull of
    /// every leaf.
    pub fn round(&mut self, round: usize) {
        for gi in 0..self.groups.len() {
            self.grow_group(gi, round);
        }
        let now = self.tick();
        for leaf in self.leaves.clone() {
            let report = self.ws.pull(&leaf, now).unwrap();
            assert!(report.is_success(), "{report:?}");
        }
    }

    fn grow_group(&mut self, gi: usize, round: usize) {
        let dir = self.src_dir();
        let rng = &mut self.rng;
        let grp = &mut self.groups[gi];
        let g = grp.g;
        let day = EVENT_EPOCH + round as i64 * DAY;

        for _ in 0..rng.gen_range(1..4) {
            let mut t = day + rng.gen_range(0..DAY);
            if rng.gen_bool(0.15) {
                t -= 3 * DAY;
            }
            grp.orders.push((t, grp.next_order));
            grp.next_order += 1;
        }
        let recent: Vec<(i64, i64)> = grp.orders.iter().rev().take(3).copied().collect();
        for (t, id) in recent {
            if rng.gen_bool(0.5) && !grp.shipments.iter().any(|s| s.2 == id) {
                let n = grp.shipments.len() as i64;
                grp.shipments.push((t + rng.gen_range(0..10 * DAY), n, id));
            }
        }
        for _ in 0..rng.gen_range(1..4) {
            let store = ["north", "south", "east"][rng.gen_range(0..3)];
            let channel = grp.sales_extended.then(|| ["web", "shop"][rng.gen_range(0..2)]);
            grp.sales.push((day + rng.gen_range(0..DAY / 2), grp.next_sale, store, rng.gen_range(1..100), channel));
            grp.next_sale += 1;
        }
        let items = ["apple", "bread", "cheese", "dates", "eggs", "flour"];
        grp.inventory.clear();
        for i in items {
            if rng.gen_bool(0.7) {
                grp.inventory.push((i.to_string(), rng.gen_range(0..12)));
            }
        }

        let mut csv = String::from("order_time,order_id\n");
        for (t, id) in &grp.orders {
            writeln!(csv, "{},{id}", iso(*t)).unwrap();
        }
        std::fs::write(dir.join(format!("orders_{g}.csv")), csv).unwrap();
        let mut csv = String::from("shipment_time,shipment_id,order_id\n");
        for (t, sid, oid) in &grp.shipments {
            writeln!(csv, "{},{sid},{oid}", iso(*t)).unwrap();
        }
        std::fs::write(dir.join(format!("shipments_{g}.csv")), csv).unwrap();
        let mut csv = String::from(if grp.sales_extended {
            "sale_time,sale_id,store,amount,channel\n"
        } else {
            "sale_time,sale_id,store,amount\n"
        });
        for (t, id, store, amount, channel) in &grp.sales {
            write!(csv, "{},{id},{store},{amount}", iso(*t)).unwrap();
            if grp.sales_extended {
                write!(csv, ",{}", channel.unwrap_or("")).unwrap();
            }
            csv.push('\n');
        }
        std::fs::write(dir.join(format!("sales_{g}.csv")), csv).unwrap();
        let mut nd = String::new();
        for (item, qty) in &grp.inventory {
            writeln!(nd, "{{\"item\":\"{item}\",\"qty\":{qty}}}").unwrap();
        }
        std::fs::write(dir.join(format!("inventory_{g}.ndjson")), nd).unwrap();
    }
}

fn ledger(cols: &[(&str, ColumnType, bool)], et: &str, key: &str, lateness: i64) -> PollingSource {
    PollingSource {
        format: SourceFormat::Csv,
        schema: schema(cols),
        event_time_column: Some(et.into()),
        merge: MergeStrategy::Ledger { primary_key: vec![key.into()] },
        allowed_lateness_ms: lateness as u64,
    }
}

fn sales_source(extended: bool) -> PollingSource {
    let mut cols = vec![
        ("sale_time", ColumnType::Timestamp, false),
        ("sale_id", ColumnType::Int64, false),
        ("store", ColumnType::String, false),
        ("amount", ColumnType::Int64, false),
    ];
    if extended {
        cols.push(("channel", ColumnType::String, true));
    }
    ledger(&cols, "sale_time", "sale_id", DAY / 2)
}

pub fn late_shipments_query(g: usize) -> String {
    format!(
        "SELECT o.order_time, o.order_id FROM orders_{g} AS o LEFT JOIN shipments_{g} AS s \
         ON o.order_id = s.order_id AND s.shipment_time BETWEEN o.order_time AND o.order_time + INTERVAL '7' DAY \
         WHERE s.shipment_id IS NULL"
    )
}

pub fn daily_sales_query(g: usize, window: &str) -> String {
    format!(
        "SELECT event_time AS day, store, SUM(amount) AS total, COUNT(*) AS n FROM sales_{g} \
         GROUP BY TUMBLE(event_time, INTERVAL {window}), store"
    )
}

fn big_sales_query(g: usize, threshold: i64) -> String {
    format!("SELECT sale_id, store, amount FROM sales_{g} WHERE amount > {threshold}")
}

/// Builds a corpus of `groups * 8 + 1` datasets grown over random rounds.
pub fn build(seed: u64, groups: usize) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::init(dir.path().join("ws")).unwrap();
    std::fs::create_dir_all(dir.path().join("sources")).unwrap();
    let mut c = Corpus {
        dir,
        ws,
        rng: ChaCha8Rng::seed_from_u64(seed),
        clock: CLOCK_EPOCH,
        roots: Vec::new(),
        derivatives: Vec::new(),
        leaves: Vec::new(),
        groups: Vec::new(),
    };
    for g in 0..groups {
        define_group(&mut c, g);
    }
    // A derivative of a derivative.
    let daily = c.id("daily_sales_0");
    let now = c.tick();
    let (id, _) = c
        .ws
        .define_derivative(
            "busy_days",
            vec![daily],
            "SELECT day, store, total FROM daily_sales_0 WHERE n >= 3",
            EngineVersion::current(),
            now,
        )
        .unwrap();
    c.derivatives.push(id);
    c.leaves.retain(|l| *l != daily);
    c.leaves.push(id);

    let rounds: Vec<usize> = (0..groups).map(|_| c.rng.gen_range(4..14)).collect();
    let max_rounds = *rounds.iter().max().unwrap();
    for r in 0..max_rounds {
        // Groups stop growing at different rounds, giving varied chain lengths.
        let active: Vec<bool> = rounds.iter().map(|n| r < *n).collect();
        for (gi, on) in active.iter().enumerate() {
            if *on {
                c.grow_group(gi, r);
            }
        }
        midway_changes(&mut c, r);
        let now = c.tick();
        for leaf in c.leaves.clone() {
            let report = c.ws.pull(&leaf, now).unwrap();
            assert!(report.is_success(), "{report:?}");
        }
    }
    c
}

fn define_group(c: &mut Corpus, g: usize) {
    let src = c.src_dir();
    let now = c.tick();
    let root = |c: &mut Corpus, name: String, source: PollingSource, file: &Path| {
        let (id, _) = c.ws.define_root(&name, source, now).unwrap();
        c.ws.set_source_path(&id, file).unwrap();
        c.roots.push(id);
        id
    };
    let orders = root(
        c,
        format!("orders_{g}"),
        ledger(&[("order_time", ColumnType::Timestamp, false), ("order_id", ColumnType::Int64, false)], "order_time", "order_id", 2 * DAY),
        &src.join(format!("orders_{g}.csv")),
    );
    let shipments = root(
        c,
        format!("shipments_{g}"),
        ledger(
            &[
                ("shipment_time", ColumnType::Timestamp, false),
                ("shipment_id", ColumnType::Int64, false),
                ("order_id", ColumnType::Int64, false),
            ],
            "shipment_time",
            "shipment_id",
            DAY,
        ),
        &src.join(format!("shipments_{g}.csv")),
    );
    let sales = root(c, format!("sales_{g}"), sales_source(false), &src.join(format!("sales_{g}.csv")));
    let inventory = root(
        c,
        format!("inventory_{g}"),
        PollingSource {
            format: SourceFormat::Ndjson,
            schema: schema(&[("item", ColumnType::String, false), ("qty", ColumnType::Int64, false)]),
            event_time_column: None,
            merge: MergeStrategy::Snapshot { primary_key: vec!["item".into()] },
            allowed_lateness_ms: 0,
        },
        &src.join(format!("inventory_{g}.ndjson")),
    );
    let mut derive = |name: String, inputs: Vec<DatasetId>, query: String| {
        let (id, _) = c.ws.define_derivative(&name, inputs, &query, EngineVersion::current(), now).unwrap();
        c.derivatives.push(id);
        c.leaves.push(id);
        id
    };
    derive(format!("late_shipments_{g}"), vec![orders, shipments], late_shipments_query(g));
    derive(format!("daily_sales_{g}"), vec![sales], daily_sales_query(g, "'1' DAY"));
    derive(format!("big_sales_{g}"), vec![sales], big_sales_query(g, 50));
    derive(format!("restock_{g}"), vec![inventory], format!("SELECT item, qty FROM inventory_{g} WHERE qty < 5"));
    c.groups.push(Group {
        g,
        orders: Vec::new(),
        shipments: Vec::new(),
        sales: Vec::new(),
        inventory: Vec::new(),
        next_order: 0,
        next_sale: 0,
        sales_extended: false,
    });
}

/// History-changing events at fixed rounds.
fn midway_changes(c: &mut Corpus, round: usize) {
    let now = ts(c.clock);
    match round {
        2 => {
            // Nullable column added to a root: downstream state carries over.
            let (_, outcome) = c.ws.define_root("sales_0", sales_source(true), now).unwrap();
            assert_eq!(outcome, odf_core::coordinator::DefineOutcome::Updated);
            c.groups[0].sales_extended = true;
        }
        3 if c.groups.len() > 1 => {
            // Compatible query change, then an incompatible one.
            let sales = c.id("sales_1");
            c.ws.define_derivative("big_sales_1", vec![sales], &big_sales_query(1, 30), EngineVersion::current(), now)
                .unwrap();
            if c.groups.len() > 2 {
                let sales = c.id("sales_2");
                c.ws.define_derivative(
                    "daily_sales_2",
                    vec![sales],
                    &daily_sales_query(2, "'12' HOUR"),
                    EngineVersion::current(),
                    now,
                )
                .unwrap();
            }
        }
        4 => {
            let shipments = c.id("shipments_0");
            let current = c.ws.chain(&shipments).unwrap().state().watermark;
            let target = current.map_or(ts(EVENT_EPOCH + 5 * DAY), |w| w.saturating_add_ms(2 * DAY));
            c.ws.set_watermark(&shipments, target, now).unwrap();
        }
        _ => {}
    }
}
