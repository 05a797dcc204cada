//! A desk-scale Text-to-SQL task: a seeded three-table database and questions
//! whose gold queries are reachable by [`ToyGrammar::sql_task`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rusqlite::Connection;

use crate::exec::{Database, DbRegistry};
use crate::policy::{ToyGrammar, ToyPolicy};
use crate::prompt::DatasetRecord;
use crate::train::{TrainConfig, Warmup};

pub const TOY_DB_ID: &str = "shop";

pub const SCHEMA: [&str; 3] = [
    "CREATE TABLE users (\n  id INTEGER PRIMARY KEY, -- users.id: unique user identifier\n  name TEXT, -- users.name: display name\n  age INTEGER, -- users.age: age in years\n  city TEXT -- users.city: home city\n)",
    "CREATE TABLE orders (\n  id INTEGER PRIMARY KEY, -- orders.id: order identifier\n  user_id INTEGER REFERENCES users(id), -- orders.user_id: purchasing user\n  amount REAL, -- orders.amount: order total in dollars\n  status TEXT -- orders.status: shipped, pending or cancelled\n)",
    "CREATE TABLE products (\n  id INTEGER PRIMARY KEY, -- products.id: product identifier\n  name TEXT, -- products.name: product name\n  price REAL, -- products.price: unit price\n  category TEXT -- products.category: product family\n)",
];

const CITIES: [&str; 4] = ["paris", "lyon", "oslo", "lima"];
const STATUSES: [&str; 3] = ["shipped", "pending", "cancelled"];
const CATEGORIES: [&str; 3] = ["tools", "books", "games"];

/// Writes the seeded database to `path`, replacing any existing file.
pub fn create_database(path: &Path) -> rusqlite::Result<()> {
    if path.exists() {
        let _ = fs::remove_file(path);
    }
    let conn = Connection::open(path)?;
    for ddl in SCHEMA {
        conn.execute_batch(ddl)?;
    }
    let tx = conn.unchecked_transaction()?;
    for id in 1..=40i64 {
        tx.execute(
            "INSERT INTO users VALUES (?1, ?2, ?3, ?4)",
            (id, format!("user{id:02}"), 18 + (id * 7) % 50, CITIES[(id % 4) as usize]),
        )?;
    }
    for id in 1..=60i64 {
        let amount = ((id * 37) % 250) as f64 + 0.25 * (id % 4) as f64;
        tx.execute(
            "INSERT INTO orders VALUES (?1, ?2, ?3, ?4)",
            (id, 1 + (id * 13) % 40, amount, STATUSES[(id % 3) as usize]),
        )?;
    }
    for id in 1..=20i64 {
        tx.execute(
            "INSERT INTO products VALUES (?1, ?2, ?3, ?4)",
            (id, format!("item{id:02}"), 5.0 + ((id * 29) % 120) as f64 * 1.5, CATEGORIES[(id % 3) as usize]),
        )?;
    }
    tx.commit()
}

fn record(id: &str, question: &str, knowledge: Option<&str>, gold: &str, difficulty: &str) -> DatasetRecord {
    DatasetRecord {
        id: id.to_string(),
        db_id: TOY_DB_ID.to_string(),
        ddl: SCHEMA.iter().map(|s| s.to_string()).collect(),
        knowledge: knowledge.map(str::to_string),
        question: question.to_string(),
        gold_sql: gold.to_string(),
        difficulty: Some(difficulty.to_string()),
    }
}

/// Questions whose gold SQL lies inside the toy grammar.
pub fn records() -> Vec<DatasetRecord> {
    vec![
        record("toy-0", "List the names of users older than 30.", Some("older than means age > 30"), "SELECT name FROM users WHERE age > 30", "filter"),
        record("toy-1", "Which order amounts exceed 100 dollars?", None, "SELECT amount FROM orders WHERE amount > 100", "filter"),
        record("toy-2", "Give every user id.", None, "SELECT id FROM users", "simple"),
        record("toy-3", "Names of users younger than 30.", Some("younger than means age < 30"), "SELECT name FROM users WHERE age < 30", "filter"),
        record("toy-4", "Ids of orders under 100 dollars.", None, "SELECT id FROM orders WHERE amount < 100", "filter"),
        record("toy-5", "Show all order amounts.", None, "SELECT amount FROM orders", "simple"),
    ]
}

/// Step size for plain gradient ascent on the toy logits.
pub const TOY_LEARNING_RATE: f64 = 10.0;

/// Training defaults sized for the toy task; everything else keeps the
/// standard defaults.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        learning_rate: TOY_LEARNING_RATE,
        max_steps: 2000,
        eval_every: 200,
        timeout_ms: 5000,
        warmup: Warmup::None,
        ..TrainConfig::default()
    }
}

/// Database, records, and a matching policy in one place.
pub struct ToyTask {
    pub dir: PathBuf,
    pub db_path: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl ToyTask {
    /// Lays out `<dir>/shop/shop.sqlite` and `<dir>/records.jsonl`.
    pub fn create(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        let db_dir = dir.join(TOY_DB_ID);
        fs::create_dir_all(&db_dir)?;
        let db_path = db_dir.join(format!("{TOY_DB_ID}.sqlite"));
        create_database(&db_path).map_err(std::io::Error::other)?;
        let records = records();
        let mut f = fs::File::create(dir.join("records.jsonl"))?;
        for r in &records {
            writeln!(f, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
        }
        Ok(Self { dir, db_path, records })
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join("records.jsonl")
    }

    pub fn registry(&self) -> DbRegistry {
        let mut reg = DbRegistry::default();
        reg.insert(TOY_DB_ID, Database::new(&self.db_path));
        reg
    }

    pub fn policy(&self) -> ToyPolicy {
        let refs: Vec<String> = self.records.iter().map(|r| r.id.clone()).collect();
        ToyPolicy::new(ToyGrammar::sql_task(), &refs).expect("toy grammar is valid")
    }
}
