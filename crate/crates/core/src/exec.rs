//! Read-only SQL execution with a wall-clock timeout, and result equivalence.
//!
//! Every execution opens its own read-only connection. A progress handler
//! interrupts the VM once the deadline passes; a watchdog thread interrupts the
//! connection as a backstop for work the progress handler cannot observe.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::limits::Limit;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};

/// Absolute tolerance applied to real-valued cells.
pub const FLOAT_TOLERANCE: f64 = 1e-6;
/// Slack allowed past the deadline before a timed-out call must have returned.
pub const GRACE: Duration = Duration::from_millis(200);
/// Per-query budget used during training and evaluation.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const PROGRESS_OPS: i32 = 1_000;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    /// The database itself could not be reached. Never a query failure.
    #[error("database unavailable: {0}")]
    Env(String),
    #[error("result has status {0:?}, not Rows")]
    NotRows(ExecStatus),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value")]
pub enum CellValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl From<ValueRef<'_>> for CellValue {
    fn from(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => CellValue::Null,
            ValueRef::Integer(i) => CellValue::Integer(i),
            ValueRef::Real(f) => CellValue::Real(f),
            ValueRef::Text(t) => CellValue::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => CellValue::Blob(b.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecStatus {
    Rows,
    SyntaxError,
    RuntimeError,
    Timeout,
}

pub type Row = Vec<CellValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Row>>,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecutionResult {
    fn failure(status: ExecStatus, elapsed: Duration, message: impl Into<String>) -> Self {
        Self {
            status,
            rows: None,
            elapsed_ms: elapsed.as_millis() as u64,
            message: Some(message.into()),
        }
    }

    pub fn is_rows(&self) -> bool {
        self.status == ExecStatus::Rows
    }
}

/// Handle to a single-file database. Opening is deferred to each execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Database {
    path: PathBuf,
}

impl Database {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn open_read_only(&self) -> Result<Connection, ExecError> {
        if !self.path.is_file() {
            return Err(ExecError::Env(format!("{} does not exist", self.path.display())));
        }
        let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX;
        let conn = Connection::open_with_flags(&self.path, flags)
            .map_err(|e| ExecError::Env(format!("{}: {e}", self.path.display())))?;
        // no ATTACH: a candidate must not reach other files
        conn.set_limit(Limit::SQLITE_LIMIT_ATTACHED, 0);
        Ok(conn)
    }
}

/// Maps `db_id`s to database files.
#[derive(Debug, Clone, Default)]
pub struct DbRegistry {
    root: Option<PathBuf>,
    explicit: HashMap<String, Database>,
}

impl DbRegistry {
    /// Resolves `<root>/<db_id>/<db_id>.sqlite` first, then `<root>/<db_id>.sqlite`.
    pub fn from_root(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()), explicit: HashMap::new() }
    }

    pub fn insert(&mut self, db_id: impl Into<String>, db: Database) {
        self.explicit.insert(db_id.into(), db);
    }

    pub fn get(&self, db_id: &str) -> Result<Database, ExecError> {
        if let Some(db) = self.explicit.get(db_id) {
            return Ok(db.clone());
        }
        if let Some(root) = &self.root {
            let nested = root.join(db_id).join(format!("{db_id}.sqlite"));
            if nested.is_file() {
                return Ok(Database::new(nested));
            }
            let flat = root.join(format!("{db_id}.sqlite"));
            if flat.is_file() {
                return Ok(Database::new(flat));
            }
        }
        Err(ExecError::Env(format!("no database registered for {db_id:?}")))
    }
}

fn classify(err: &rusqlite::Error) -> ExecStatus {
    if err.sqlite_error_code() == Some(ErrorCode::OperationInterrupted) {
        return ExecStatus::Timeout;
    }
    let msg = err.to_string();
    if msg.contains("syntax error") || msg.contains("incomplete input") || msg.contains("unrecognized token") {
        ExecStatus::SyntaxError
    } else {
        ExecStatus::RuntimeError
    }
}

/// Runs one read-only query with a wall-clock budget.
///
/// Query failures are reported through [`ExecStatus`]; only an unreachable
/// database is an `Err`.
pub fn execute_with_timeout(sql: &str, db: &Database, timeout: Duration) -> Result<ExecutionResult, ExecError> {
    assert!(!timeout.is_zero(), "timeout must be positive");
    let conn = db.open_read_only()?;
    let start = Instant::now();
    let deadline = start + timeout;

    conn.progress_handler(PROGRESS_OPS, Some(move || Instant::now() >= deadline));

    let (done_tx, done_rx) = mpsc::channel::<()>();
    let interrupt = conn.get_interrupt_handle();
    let watchdog = thread::spawn(move || {
        if let Err(mpsc::RecvTimeoutError::Timeout) = done_rx.recv_timeout(timeout) {
            interrupt.interrupt();
        }
    });

    let outcome = run_query(&conn, sql, deadline);
    let _ = done_tx.send(());
    let _ = watchdog.join();
    let elapsed = start.elapsed();

    Ok(match outcome {
        Ok(rows) => ExecutionResult {
            status: ExecStatus::Rows,
            rows: Some(rows),
            elapsed_ms: elapsed.as_millis() as u64,
            message: None,
        },
        Err(QueryFailure::Sqlite(e)) => {
            let status = classify(&e);
            let elapsed = if status == ExecStatus::Timeout { elapsed.max(timeout) } else { elapsed };
            ExecutionResult::failure(status, elapsed, e.to_string())
        }
        Err(QueryFailure::Rejected(msg)) => ExecutionResult::failure(ExecStatus::RuntimeError, elapsed, msg),
        Err(QueryFailure::Deadline) => ExecutionResult::failure(ExecStatus::Timeout, elapsed.max(timeout), "deadline exceeded"),
    })
}

enum QueryFailure {
    Sqlite(rusqlite::Error),
    Rejected(String),
    Deadline,
}

fn run_query(conn: &Connection, sql: &str, deadline: Instant) -> Result<Vec<Row>, QueryFailure> {
    if sql.trim().is_empty() {
        return Err(QueryFailure::Rejected("empty query".into()));
    }
    if has_trailing_statement(sql) {
        return Err(QueryFailure::Rejected("multiple statements are not allowed".into()));
    }
    let mut stmt = conn.prepare(sql).map_err(QueryFailure::Sqlite)?;
    if !stmt.readonly() {
        return Err(QueryFailure::Rejected("statement would modify the database".into()));
    }
    let ncols = stmt.column_count();
    let mut rows = stmt.query([]).map_err(QueryFailure::Sqlite)?;
    let mut out = Vec::new();
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                let mut cells = Vec::with_capacity(ncols);
                for i in 0..ncols {
                    cells.push(CellValue::from(row.get_ref(i).map_err(QueryFailure::Sqlite)?));
                }
                out.push(cells);
                if Instant::now() >= deadline {
                    return Err(QueryFailure::Deadline);
                }
            }
            Ok(None) => break,
            Err(e) => return Err(QueryFailure::Sqlite(e)),
        }
    }
    Ok(out)
}

/// True when anything other than whitespace or comments follows the first
/// top-level `;`.
fn has_trailing_statement(sql: &str) -> bool {
    let bytes = sql.as_bytes();
    let mut i = 0;
    let mut after_semicolon = false;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 1;
            }
            _ if after_semicolon && !c.is_ascii_whitespace() && c != b';' => return true,
            b'\'' | b'"' | b'`' => {
                let quote = c;
                i += 1;
                while i < bytes.len() && bytes[i] != quote {
                    i += 1;
                }
            }
            b';' => after_semicolon = true,
            _ => {}
        }
        i += 1;
    }
    false
}

/// Whether duplicate rows count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    #[default]
    Bag,
    Set,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceOptions {
    pub order_sensitive: bool,
    pub multiplicity: Multiplicity,
    pub tolerance: f64,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        Self { order_sensitive: false, multiplicity: Multiplicity::Bag, tolerance: FLOAT_TOLERANCE }
    }
}

impl EquivalenceOptions {
    pub fn ordered(order_sensitive: bool) -> Self {
        Self { order_sensitive, ..Self::default() }
    }

    /// Order matters only when the gold query sorts at the top level.
    pub fn for_gold(gold_sql: &str) -> Self {
        Self::ordered(has_top_level_order_by(gold_sql))
    }
}

/// Canonical cell. Integers and reals share one numeric domain, snapped to the
/// tolerance grid.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyCell {
    Null,
    Num(f64),
    Text(Vec<u8>),
    Blob(Vec<u8>),
}

impl KeyCell {
    fn rank(&self) -> u8 {
        match self {
            KeyCell::Null => 0,
            KeyCell::Num(_) => 1,
            KeyCell::Text(_) => 2,
            KeyCell::Blob(_) => 3,
        }
    }
}

impl Eq for KeyCell {}

impl Ord for KeyCell {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (KeyCell::Num(a), KeyCell::Num(b)) => a.total_cmp(b),
            (KeyCell::Text(a), KeyCell::Text(b)) | (KeyCell::Blob(a), KeyCell::Blob(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl PartialOrd for KeyCell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn key_cell(v: &CellValue, tolerance: f64) -> KeyCell {
    let snap = |x: f64| {
        let g = (x / tolerance).round();
        // fold -0.0 into 0.0
        KeyCell::Num(if g == 0.0 { 0.0 } else { g })
    };
    match v {
        CellValue::Null => KeyCell::Null,
        CellValue::Integer(i) => snap(*i as f64),
        CellValue::Real(f) => snap(*f),
        CellValue::Text(s) => KeyCell::Text(s.as_bytes().to_vec()),
        CellValue::Blob(b) => KeyCell::Blob(b.clone()),
    }
}

/// Comparable form of a successful result.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ResultKey {
    pub ordered: bool,
    pub rows: Vec<Vec<KeyCell>>,
}

pub fn normalize_result(r: &ExecutionResult, opts: &EquivalenceOptions) -> Result<ResultKey, ExecError> {
    let rows = match (&r.status, &r.rows) {
        (ExecStatus::Rows, Some(rows)) => rows,
        (status, _) => return Err(ExecError::NotRows(*status)),
    };
    let mut keyed: Vec<Vec<KeyCell>> = rows
        .iter()
        .map(|row| row.iter().map(|c| key_cell(c, opts.tolerance)).collect())
        .collect();
    if !opts.order_sensitive {
        keyed.sort();
    }
    if opts.multiplicity == Multiplicity::Set {
        if opts.order_sensitive {
            let mut seen = std::collections::BTreeSet::new();
            keyed.retain(|row| seen.insert(row.clone()));
        } else {
            keyed.dedup();
        }
    }
    Ok(ResultKey { ordered: opts.order_sensitive, rows: keyed })
}

/// True iff both results are `Rows` with equal canonical keys.
pub fn results_equivalent(a: &ExecutionResult, b: &ExecutionResult, opts: &EquivalenceOptions) -> bool {
    match (normalize_result(a, opts), normalize_result(b, opts)) {
        (Ok(ka), Ok(kb)) => ka == kb,
        _ => false,
    }
}

/// Detects an `ORDER BY` outside any parentheses, string literal, or comment.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let bytes = sql.as_bytes();
    let mut depth = 0i32;
    let mut i = 0;
    let mut words: Vec<String> = Vec::new();
    let mut word = String::new();

    let flush = |word: &mut String, words: &mut Vec<String>| {
        if !word.is_empty() {
            words.push(std::mem::take(word).to_ascii_uppercase());
        }
    };

    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\'' | b'"' | b'`' => {
                flush(&mut word, &mut words);
                let quote = c;
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == quote {
                        if i + 1 < bytes.len() && bytes[i + 1] == quote {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
                if depth == 0 {
                    words.push(String::new());
                }
            }
            b'[' => {
                flush(&mut word, &mut words);
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
                if depth == 0 {
                    words.push(String::new());
                }
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                flush(&mut word, &mut words);
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                flush(&mut word, &mut words);
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 1;
            }
            b'(' => {
                flush(&mut word, &mut words);
                depth += 1;
            }
            b')' => {
                flush(&mut word, &mut words);
                depth -= 1;
            }
            c if c.is_ascii_alphanumeric() || c == b'_' => {
                if depth == 0 {
                    word.push(c as char);
                }
            }
            _ => {
                flush(&mut word, &mut words);
                if depth == 0 && !c.is_ascii_whitespace() {
                    words.push(String::new());
                }
            }
        }
        i += 1;
    }
    flush(&mut word, &mut words);
    words.windows(2).any(|w| w[0] == "ORDER" && w[1] == "BY")
}

/// Memoizes executions per `(database, sql)`. Databases are read-only, so a
/// cached result is the result any re-execution would produce, barring timeouts.
#[derive(Debug, Default)]
pub struct ExecCache {
    entries: Mutex<HashMap<(PathBuf, String), ExecutionResult>>,
}

impl ExecCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn execute(&self, sql: &str, db: &Database, timeout: Duration) -> Result<ExecutionResult, ExecError> {
        let key = (db.path().to_path_buf(), sql.to_string());
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let result = execute_with_timeout(sql, db, timeout)?;
        self.entries.lock().unwrap().insert(key, result.clone());
        Ok(result)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
