//! Futures engine: schedules task commands under generated ids, indexes them
//! in a shared table and resolves dependencies between them.
//!
//! Every future gets its own output directory `<runs_root>/<run_id>/<future_id>/`
//! holding `stdout.txt`, `stderr.txt` and whatever the command writes. The
//! command runs through `sh -c` with that directory as working directory and
//! `${param}` placeholders replaced by shell-quoted input paths. The following
//! variables are exported to the command:
//!
//! | variable              | value                                   |
//! |-----------------------|-----------------------------------------|
//! | `FCFLOW_FUTURE_ID`    | id of the future                        |
//! | `FCFLOW_OUTPUT_DIR`   | the future's output directory           |
//! | `FCFLOW_RUN_DIR`      | `<runs_root>/<run_id>`                  |
//! | `FCFLOW_MANIFEST_DIR` | directory of the manifest (or base dir) |

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::runtime::Handle;
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::registry::{BoundArguments, OutputSource, Registry, TaskDefinition};
use crate::serde_util::duration_ms;

/// Environment variable naming the directory under which run directories are created.
pub const RUNS_ROOT_ENV: &str = "FCFLOW_RUNS_ROOT";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FutureId {
    text: String,
    counter: u64,
}

impl FutureId {
    pub fn new(counter: u64, task: &str) -> Self {
        Self {
            text: format!("future_{counter}_run_{task}"),
            counter,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn task_name(&self) -> &str {
        let prefix_len = format!("future_{}_run_", self.counter).len();
        &self.text[prefix_len..]
    }
}

impl FromStr for FutureId {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || EngineError::InvalidFutureId(s.to_string());
        let rest = s.strip_prefix("future_").ok_or_else(invalid)?;
        let (digits, task) = rest.split_once("_run_").ok_or_else(invalid)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(invalid());
        }
        if !crate::registry::is_identifier(task) {
            return Err(invalid());
        }
        let counter = digits.parse().map_err(|_| invalid())?;
        let id = Self::new(counter, task);
        // Rejects leading zeros, which would alias another id.
        if id.text != s {
            return Err(invalid());
        }
        Ok(id)
    }
}

impl TryFrom<String> for FutureId {
    type Error = EngineError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<FutureId> for String {
    fn from(id: FutureId) -> Self {
        id.text
    }
}

impl fmt::Display for FutureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl PartialOrd for FutureId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FutureId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.counter, &self.text).cmp(&(other.counter, &other.text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FutureState {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl FutureState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Succeeded | Self::Failed)
    }

    /// A future that is never launched (its upstream failed) goes straight
    /// from pending to failed.
    pub fn can_transition_to(self, next: FutureState) -> bool {
        matches!(
            (self, next),
            (Self::Pending, Self::Running)
                | (Self::Pending, Self::Failed)
                | (Self::Running, Self::Succeeded)
                | (Self::Running, Self::Failed)
        )
    }
}

impl fmt::Display for FutureState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pending => "pending",
            Self::Running => "running",
            Self::Succeeded => "succeeded",
            Self::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub exit_code: i32,
    pub output_dir: PathBuf,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    /// Files found for every declared output role after the command exited.
    pub produced_outputs: BTreeMap<String, Vec<PathBuf>>,
    #[serde(with = "duration_ms", rename = "wall_time_ms")]
    pub wall_time: Duration,
    /// Microseconds since engine start at which the command was launched;
    /// `None` when it never ran.
    pub started_at_us: Option<u64>,
    pub finished_at_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFuture {
    pub id: FutureId,
    pub task: String,
    pub state: FutureState,
    pub output_dir: PathBuf,
    /// Resolved input paths per file parameter. Empty until launch for
    /// futures scheduled from other futures.
    pub inputs: BTreeMap<String, Vec<PathBuf>>,
    /// Upstream future per slot, for futures scheduled from other futures.
    pub upstream: BTreeMap<String, FutureId>,
    pub record: Option<ExecutionRecord>,
}

/// State change notification delivered to an engine observer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FutureTransition {
    pub id: FutureId,
    pub task: String,
    pub state: FutureState,
    pub upstream: Vec<FutureId>,
    pub at_us: u64,
}

pub type FutureObserver = Arc<dyn Fn(&FutureTransition) + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task}`: missing binding for `{param}`")]
    MissingBinding { task: String, param: String },
    #[error("task `{task}`: unexpected binding `{name}`")]
    UnexpectedBinding { task: String, name: String },
    #[error("invalid future id `{0}`")]
    InvalidFutureId(String),
    #[error("unknown future id `{0}`")]
    UnknownFuture(String),
    #[error("slot `{slot}` expects a future of task `{expected}`, got `{found}`")]
    SlotTaskMismatch {
        slot: String,
        expected: String,
        found: FutureId,
    },
    #[error("cannot create output directory {path}: {source}")]
    OutputDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("future `{0}` not found")]
    NotFound(String),
    #[error("timed out after {timeout:?} waiting for `{id}`")]
    Timeout { id: FutureId, timeout: Duration },
    #[error("the engine must be created inside a tokio runtime")]
    NoRuntime,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub runs_root: PathBuf,
    pub run_id: String,
    /// Directory against which relative input paths are resolved. Defaults to
    /// the manifest directory, or the current directory.
    pub base_dir: Option<PathBuf>,
    /// First counter value handed out.
    pub initial_counter: u64,
}

impl EngineConfig {
    pub fn new(runs_root: impl Into<PathBuf>, run_id: impl Into<String>) -> Self {
        Self {
            runs_root: runs_root.into(),
            run_id: run_id.into(),
            base_dir: None,
            initial_counter: 0,
        }
    }

    /// Runs root from `FCFLOW_RUNS_ROOT` (default `./runs`) and a fresh run id.
    pub fn from_env() -> Self {
        let root = std::env::var_os(RUNS_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        Self::new(root, generate_run_id())
    }

    pub fn with_initial_counter(mut self, counter: u64) -> Self {
        self.initial_counter = counter;
        self
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }
}

/// `run-<utc timestamp>-<pid>-<sequence>`, unique within and across processes.
pub fn generate_run_id() -> String {
    static SEQUENCE: AtomicU64 = AtomicU64::new(0);
    format!(
        "run-{}-{}-{}",
        chrono::Utc::now().format("%Y%m%dT%H%M%S%3f"),
        std::process::id(),
        SEQUENCE.fetch_add(1, Ordering::Relaxed)
    )
}

struct Entry {
    future: TaskFuture,
    state_tx: watch::Sender<FutureState>,
}

struct Inner {
    registry: Arc<Registry>,
    run_id: String,
    run_dir: PathBuf,
    base_dir: PathBuf,
    manifest_dir: PathBuf,
    counter: AtomicU64,
    table: Mutex<BTreeMap<FutureId, Entry>>,
    epoch: Instant,
    handle: Handle,
    observer: Option<FutureObserver>,
}

enum Launch {
    Files(BTreeMap<String, Vec<PathBuf>>),
    Futures(Vec<(FutureId, watch::Receiver<FutureState>)>),
}

/// Shared handle on one run's future table. Cheap to clone.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("run_id", &self.inner.run_id)
            .field("run_dir", &self.inner.run_dir)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(registry: Arc<Registry>, config: EngineConfig) -> Result<Self, EngineError> {
        Self::with_observer(registry, config, None)
    }

    pub fn with_observer(
        registry: Arc<Registry>,
        config: EngineConfig,
        observer: Option<FutureObserver>,
    ) -> Result<Self, EngineError> {
        let handle = Handle::try_current().map_err(|_| EngineError::NoRuntime)?;
        let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
        let absolute = |p: PathBuf| if p.is_absolute() { p } else { cwd.join(p) };
        let run_dir = absolute(config.runs_root).join(&config.run_id);
        std::fs::create_dir_all(&run_dir).map_err(|source| EngineError::OutputDir {
            path: run_dir.clone(),
            source,
        })?;
        let manifest_dir = registry.source_dir().map(Path::to_path_buf);
        let base_dir = absolute(
            config
                .base_dir
                .or_else(|| manifest_dir.clone())
                .unwrap_or_else(|| cwd.clone()),
        );
        Ok(Self {
            inner: Arc::new(Inner {
                registry,
                run_id: config.run_id,
                run_dir,
                manifest_dir: manifest_dir.unwrap_or_else(|| base_dir.clone()),
                base_dir,
                counter: AtomicU64::new(config.initial_counter),
                table: Mutex::new(BTreeMap::new()),
                epoch: Instant::now(),
                handle,
                observer,
            }),
        })
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.inner.registry
    }

    pub fn run_id(&self) -> &str {
        &self.inner.run_id
    }

    pub fn run_dir(&self) -> &Path {
        &self.inner.run_dir
    }

    pub fn base_dir(&self) -> &Path {
        &self.inner.base_dir
    }

    /// Hands out `future_<counter>_run_<task_name>` and advances the counter.
    pub fn next_future_id(&self, task_name: &str) -> FutureId {
        FutureId::new(self.inner.counter.fetch_add(1, Ordering::SeqCst), task_name)
    }

    fn task(&self, name: &str) -> Result<&TaskDefinition, EngineError> {
        self.inner
            .registry
            .task(name)
            .ok_or_else(|| EngineError::UnknownTask(name.to_string()))
    }

    fn resolve_input(&self, raw: &str) -> PathBuf {
        let path = Path::new(raw);
        let joined = if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.inner.base_dir.join(path)
        };
        joined
            .components()
            .filter(|c| !matches!(c, Component::CurDir))
            .collect()
    }

    /// Schedules `task` on physical files. Returns as soon as the future is
    /// indexed; the command runs in the background.
    pub fn schedule_from_files(
        &self,
        task_name: &str,
        bindings: &BoundArguments,
    ) -> Result<FutureId, EngineError> {
        let task = self.task(task_name)?;
        if let Some((name, _)) = bindings.iter().find(|(k, _)| task.file_param(k).is_none()) {
            return Err(EngineError::UnexpectedBinding {
                task: task.name.clone(),
                name: name.to_string(),
            });
        }
        let mut inputs = BTreeMap::new();
        for param in &task.file_params {
            let value = bindings.get(&param.name).ok_or_else(|| EngineError::MissingBinding {
                task: task.name.clone(),
                param: param.name.clone(),
            })?;
            inputs.insert(param.name.clone(), vec![self.resolve_input(value)]);
        }
        self.launch(task_name, inputs.clone(), BTreeMap::new(), Launch::Files(inputs))
    }

    /// Schedules `task` on the outputs of upstream futures, one per slot.
    /// The command starts once every upstream future has succeeded; if one
    /// fails, this future fails without running.
    pub fn schedule_from_futures(
        &self,
        task_name: &str,
        slot_bindings: &BoundArguments,
    ) -> Result<FutureId, EngineError> {
        let task = self.task(task_name)?;
        if let Some((name, _)) = slot_bindings.iter().find(|(k, _)| task.slot(k).is_none()) {
            return Err(EngineError::UnexpectedBinding {
                task: task.name.clone(),
                name: name.to_string(),
            });
        }
        for param in &task.file_params {
            if !task.upstream_slots.iter().any(|s| s.wiring.contains_key(&param.name)) {
                return Err(EngineError::MissingBinding {
                    task: task.name.clone(),
                    param: param.name.clone(),
                });
            }
        }

        let mut upstream = BTreeMap::new();
        let mut waits = Vec::new();
        {
            let table = self.lock();
            for slot in &task.upstream_slots {
                let raw = slot_bindings.get(&slot.name).ok_or_else(|| EngineError::MissingBinding {
                    task: task.name.clone(),
                    param: slot.name.clone(),
                })?;
                let id: FutureId = raw
                    .parse()
                    .map_err(|_| EngineError::UnknownFuture(raw.to_string()))?;
                let entry = table
                    .get(&id)
                    .ok_or_else(|| EngineError::UnknownFuture(raw.to_string()))?;
                if entry.future.task != slot.task {
                    return Err(EngineError::SlotTaskMismatch {
                        slot: slot.name.clone(),
                        expected: slot.task.clone(),
                        found: id,
                    });
                }
                waits.push((id.clone(), entry.state_tx.subscribe()));
                upstream.insert(slot.name.clone(), id);
            }
        }
        self.launch(task_name, BTreeMap::new(), upstream, Launch::Futures(waits))
    }

    fn launch(
        &self,
        task_name: &str,
        inputs: BTreeMap<String, Vec<PathBuf>>,
        upstream: BTreeMap<String, FutureId>,
        launch: Launch,
    ) -> Result<FutureId, EngineError> {
        let id = self.next_future_id(task_name);
        let output_dir = self.inner.run_dir.join(id.as_str());
        // create_dir, not create_dir_all: an existing directory would mean two
        // futures sharing outputs.
        std::fs::create_dir(&output_dir).map_err(|source| EngineError::OutputDir {
            path: output_dir.clone(),
            source,
        })?;
        let future = TaskFuture {
            id: id.clone(),
            task: task_name.to_string(),
            state: FutureState::Pending,
            output_dir,
            inputs,
            upstream,
            record: None,
        };
        let transition = self.transition_of(&future);
        let (state_tx, _) = watch::channel(FutureState::Pending);
        self.lock().insert(id.clone(), Entry { future, state_tx });
        self.notify(transition);

        let inner = Arc::clone(&self.inner);
        let driven = id.clone();
        self.inner.handle.spawn(async move {
            Engine { inner }.drive(driven, launch).await;
        });
        Ok(id)
    }

    async fn drive(self, id: FutureId, launch: Launch) {
        let inputs = match launch {
            Launch::Files(inputs) => inputs,
            Launch::Futures(waits) => match self.await_upstream(waits).await {
                Ok(()) => match self.wire_inputs(&id) {
                    Ok(inputs) => inputs,
                    Err(cause) => return self.fail_unlaunched(&id, cause),
                },
                Err(cause) => return self.fail_unlaunched(&id, cause),
            },
        };
        self.run_command(&id, inputs).await;
    }

    /// Resolves once every upstream succeeded, or as soon as one fails.
    async fn await_upstream(
        &self,
        waits: Vec<(FutureId, watch::Receiver<FutureState>)>,
    ) -> Result<(), String> {
        let mut set = JoinSet::new();
        for (upstream, mut rx) in waits {
            set.spawn(async move {
                let state = rx
                    .wait_for(|s| s.is_terminal())
                    .await
                    .map(|s| *s)
                    .unwrap_or(FutureState::Failed);
                (upstream, state)
            });
        }
        while let Some(joined) = set.join_next().await {
            match joined {
                Ok((_, FutureState::Succeeded)) => {}
                Ok((upstream, _)) => return Err(format!("upstream future `{upstream}` failed")),
                Err(e) => return Err(format!("upstream wait aborted: {e}")),
            }
        }
        Ok(())
    }

    fn wire_inputs(&self, id: &FutureId) -> Result<BTreeMap<String, Vec<PathBuf>>, String> {
        let mut table = self.lock();
        let future = &table[id].future;
        let task = self
            .inner
            .registry
            .task(&future.task)
            .expect("scheduled futures name registered tasks");
        let mut inputs = BTreeMap::new();
        for slot in &task.upstream_slots {
            let upstream_id = &future.upstream[&slot.name];
            let record = table[upstream_id].future.record.as_ref();
            for (param, role) in &slot.wiring {
                let files = record
                    .and_then(|r| r.produced_outputs.get(role))
                    .filter(|files| !files.is_empty())
                    .ok_or_else(|| {
                        format!("upstream future `{upstream_id}` produced no `{role}` output for `{param}`")
                    })?;
                inputs.insert(param.clone(), files.clone());
            }
        }
        table.get_mut(id).expect("entry exists").future.inputs = inputs.clone();
        Ok(inputs)
    }

    fn now_us(&self) -> u64 {
        self.inner.epoch.elapsed().as_micros() as u64
    }

    fn fail_unlaunched(&self, id: &FutureId, cause: String) {
        let output_dir = self.inner.run_dir.join(id.as_str());
        let stdout_path = output_dir.join("stdout.txt");
        let stderr_path = output_dir.join("stderr.txt");
        let _ = std::fs::write(&stdout_path, b"");
        let _ = std::fs::write(&stderr_path, format!("{cause}\n"));
        let record = ExecutionRecord {
            exit_code: -1,
            output_dir,
            stdout_path,
            stderr_path,
            produced_outputs: BTreeMap::new(),
            wall_time: Duration::ZERO,
            started_at_us: None,
            finished_at_us: self.now_us(),
            cause: Some(cause),
        };
        self.finish(id, FutureState::Failed, record);
    }

    async fn run_command(&self, id: &FutureId, inputs: BTreeMap<String, Vec<PathBuf>>) {
        let (task, output_dir) = {
            let table = self.lock();
            let future = &table[id].future;
            let task = self
                .inner
                .registry
                .task(&future.task)
                .expect("scheduled futures name registered tasks")
                .clone();
            (task, future.output_dir.clone())
        };
        let command = crate::registry::substitute_placeholders(&task.command_template, |name| {
            inputs
                .get(name)
                .map(|paths| {
                    paths
                        .iter()
                        .map(|p| shell_quote(&p.to_string_lossy()))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_default()
        });
        let stdout_path = output_dir.join("stdout.txt");
        let stderr_path = output_dir.join("stderr.txt");
        let files = std::fs::File::create(&stdout_path)
            .and_then(|out| Ok((out, std::fs::File::create(&stderr_path)?)));
        let (stdout, stderr) = match files {
            Ok(files) => files,
            Err(e) => return self.fail_unlaunched(id, format!("cannot create output files: {e}")),
        };

        let started_at = self.now_us();
        self.set_state(id, FutureState::Running);
        let clock = Instant::now();
        let status = tokio::process::Command::new("sh")
            .arg("-c")
            .arg(&command)
            .current_dir(&output_dir)
            .env("FCFLOW_FUTURE_ID", id.as_str())
            .env("FCFLOW_OUTPUT_DIR", &output_dir)
            .env("FCFLOW_RUN_DIR", &self.inner.run_dir)
            .env("FCFLOW_MANIFEST_DIR", &self.inner.manifest_dir)
            .stdin(std::process::Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .status()
            .await;
        let wall_time = clock.elapsed();
        let (exit_code, cause) = match status {
            Ok(status) => match status.code() {
                Some(code) => (code, None),
                None => (-1, Some(signal_cause(&status))),
            },
            Err(e) => (-1, Some(format!("failed to spawn command: {e}"))),
        };
        let produced_outputs = collect_outputs(&task, &output_dir);
        let record = ExecutionRecord {
            exit_code,
            output_dir,
            stdout_path,
            stderr_path,
            produced_outputs,
            wall_time,
            started_at_us: Some(started_at),
            finished_at_us: self.now_us(),
            cause,
        };
        let state = if exit_code == 0 {
            FutureState::Succeeded
        } else {
            FutureState::Failed
        };
        tracing::debug!(future = %id, exit_code, "future finished");
        self.finish(id, state, record);
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<FutureId, Entry>> {
        self.inner.table.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn transition_of(&self, future: &TaskFuture) -> FutureTransition {
        FutureTransition {
            id: future.id.clone(),
            task: future.task.clone(),
            state: future.state,
            upstream: future.upstream.values().cloned().collect(),
            at_us: self.now_us(),
        }
    }

    fn notify(&self, transition: FutureTransition) {
        if let Some(observer) = &self.inner.observer {
            observer(&transition);
        }
    }

    fn set_state(&self, id: &FutureId, state: FutureState) {
        let transition = {
            let mut table = self.lock();
            let entry = table.get_mut(id).expect("entry exists");
            debug_assert!(entry.future.state.can_transition_to(state));
            entry.future.state = state;
            self.transition_of(&entry.future)
        };
        self.notify(transition);
        self.publish(id, state);
    }

    /// Wakes waiters. Runs after the observer so it never lags behind them.
    fn publish(&self, id: &FutureId, state: FutureState) {
        if let Some(entry) = self.lock().get(id) {
            entry.state_tx.send_replace(state);
        }
    }

    fn finish(&self, id: &FutureId, state: FutureState, record: ExecutionRecord) {
        let transition = {
            let mut table = self.lock();
            let entry = table.get_mut(id).expect("entry exists");
            debug_assert!(entry.future.state.can_transition_to(state));
            entry.future.record = Some(record);
            entry.future.state = state;
            self.transition_of(&entry.future)
        };
        self.notify(transition);
        self.publish(id, state);
    }

    /// Snapshot of one future.
    pub fn resolve(&self, id: &FutureId) -> Result<TaskFuture, EngineError> {
        self.lock()
            .get(id)
            .map(|e| e.future.clone())
            .ok_or_else(|| EngineError::NotFound(id.to_string()))
    }

    /// Like [`Engine::resolve`] for an unparsed id.
    pub fn resolve_str(&self, id: &str) -> Result<TaskFuture, EngineError> {
        let id: FutureId = id.parse().map_err(|_| EngineError::NotFound(id.to_string()))?;
        self.resolve(&id)
    }

    /// Snapshot of every future, in scheduling order.
    pub fn futures(&self) -> Vec<TaskFuture> {
        self.lock().values().map(|e| e.future.clone()).collect()
    }

    /// Blocks the calling task until the future is terminal or `timeout` elapses.
    pub async fn await_completion(
        &self,
        id: &FutureId,
        timeout: Duration,
    ) -> Result<ExecutionRecord, EngineError> {
        let mut rx = self
            .lock()
            .get(id)
            .map(|e| e.state_tx.subscribe())
            .ok_or_else(|| EngineError::NotFound(id.to_string()))?;
        let waited = tokio::time::timeout(timeout, async {
            // The sender lives in the table for the engine's lifetime.
            let _ = rx.wait_for(|s| s.is_terminal()).await;
        })
        .await;
        if waited.is_err() {
            return Err(EngineError::Timeout {
                id: id.clone(),
                timeout,
            });
        }
        self.resolve(id)?
            .record
            .ok_or_else(|| EngineError::NotFound(id.to_string()))
    }

    /// Waits until every scheduled future, including ones scheduled while
    /// waiting, is terminal.
    pub async fn await_all(&self, timeout: Duration) -> Result<Vec<TaskFuture>, EngineError> {
        let deadline = Instant::now() + timeout;
        loop {
            let pending: Vec<FutureId> = self
                .lock()
                .values()
                .filter(|e| !e.state_tx.borrow().is_terminal())
                .map(|e| e.future.id.clone())
                .collect();
            if pending.is_empty() {
                return Ok(self.futures());
            }
            for id in pending {
                let remaining = deadline.saturating_duration_since(Instant::now());
                self.await_completion(&id, remaining).await?;
            }
        }
    }
}

/// Quotes `s` as a single `sh` word.
pub fn shell_quote(s: &str) -> String {
    // Paths cannot contain NUL, the only input shlex refuses.
    shlex::try_quote(s).map_or_else(|_| format!("'{}'", s.replace('\0', "")), |q| q.into_owned())
}

#[cfg(unix)]
fn signal_cause(status: &std::process::ExitStatus) -> String {
    use std::os::unix::process::ExitStatusExt;
    match status.signal() {
        Some(signal) => format!("terminated by signal {signal}"),
        None => "terminated without exit code".to_string(),
    }
}

#[cfg(not(unix))]
fn signal_cause(_status: &std::process::ExitStatus) -> String {
    "terminated without exit code".to_string()
}

fn collect_outputs(task: &TaskDefinition, output_dir: &Path) -> BTreeMap<String, Vec<PathBuf>> {
    task.declared_outputs
        .iter()
        .map(|output| (output.role.clone(), find_output(&output.source, output_dir)))
        .collect()
}

/// Files currently present for an output declaration.
pub fn find_output(source: &OutputSource, output_dir: &Path) -> Vec<PathBuf> {
    match source {
        OutputSource::Path(path) => {
            let path = output_dir.join(path);
            if path.exists() {
                vec![path]
            } else {
                Vec::new()
            }
        }
        OutputSource::Glob(pattern) => {
            let full = format!(
                "{}/{}",
                glob::Pattern::escape(&output_dir.to_string_lossy()),
                pattern
            );
            let mut found: Vec<PathBuf> = glob::glob(&full)
                .map(|paths| paths.filter_map(Result::ok).collect())
                .unwrap_or_default();
            found.sort();
            found
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn future_ids_follow_the_grammar() {
        let id = FutureId::new(5, "vcf_transform");
        assert_eq!(id.as_str(), "future_5_run_vcf_transform");
        assert_eq!(id.task_name(), "vcf_transform");
        assert_eq!(id.counter(), 5);
        assert_eq!("future_6_run_pyclone_vi".parse::<FutureId>().unwrap().counter(), 6);
        for bad in ["future_x_run_a", "future_1_run_", "future_01_run_a", "fut_1_run_a", "future_1_run_A"] {
            assert!(bad.parse::<FutureId>().is_err(), "{bad}");
        }
    }

    #[test]
    fn ids_order_numerically() {
        assert!(FutureId::new(2, "b") < FutureId::new(10, "a"));
    }

    #[test]
    fn state_transitions() {
        use FutureState::*;
        assert!(Pending.can_transition_to(Running));
        assert!(Running.can_transition_to(Succeeded));
        assert!(Pending.can_transition_to(Failed));
        assert!(!Succeeded.can_transition_to(Running));
        assert!(!Running.can_transition_to(Pending));
        assert!(!Pending.can_transition_to(Succeeded));
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("./a/b.vcf"), "./a/b.vcf");
        for raw in ["a b", "it's", "$(rm -rf /)", "", "x\"y`z`"] {
            assert_eq!(shlex::split(&shell_quote(raw)), Some(vec![raw.to_string()]));
        }
    }
}
