//! In-process hierarchical actor runtime.
//!
//! Every placed actor owns one OS thread and a FIFO mailbox. Invocations
//! return [`TaskFuture`]s immediately; [`Runtime::wait`] gives k-of-n
//! completion in completion order. Immutable values are shared through an
//! object store that serializes each value exactly once and hands out
//! reference-counted handles, so fetching never copies.

use std::any::Any;
use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Display;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::framing::{tag_name, Codec, FrameError, TypeTag, HEADER_LEN};

pub type ActorId = u64;
pub type ObjectId = u64;
pub type TaskId = u64;

/// The driver's id; actors are numbered from 1 in spawn order.
pub const DRIVER: ActorId = 0;

pub const DEFAULT_SLOTS: usize = 64;
pub const SLOTS_ENV: &str = "RLDIST_SLOTS";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("resource claim must request at least one slot")]
    InvalidClaim,
    #[error("runtime has shut down")]
    RuntimeShutdown,
    #[error("actor {0} is unavailable")]
    ActorUnavailable(ActorId),
    #[error("actor {actor} method `{method}` failed: {message}")]
    MethodError {
        actor: ActorId,
        method: String,
        message: String,
    },
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("object {0} holds a different type")]
    TypeMismatch(ObjectId),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceClaim {
    pub cpu_slots: usize,
    /// Advisory only.
    pub memory_hint: u64,
}

impl ResourceClaim {
    pub fn slots(cpu_slots: usize) -> Self {
        Self {
            cpu_slots,
            memory_hint: 0,
        }
    }
}

impl Default for ResourceClaim {
    fn default() -> Self {
        Self::slots(1)
    }
}

/// Tasks of one actor, counted from 0 across restarts, that crash it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FailureSchedule {
    pub fail_on_tasks: BTreeSet<u64>,
    /// Restart from the constructor after a crash instead of staying failed.
    pub recoverable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub slot_capacity: usize,
    pub seed: u64,
    /// actor id → service-time multiplier
    pub straggler_injection: BTreeMap<ActorId, f64>,
    pub failure_injection: BTreeMap<ActorId, FailureSchedule>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            slot_capacity: DEFAULT_SLOTS,
            seed: 0,
            straggler_injection: BTreeMap::new(),
            failure_injection: BTreeMap::new(),
        }
    }
}

impl RuntimeConfig {
    pub fn with_slots(slot_capacity: usize) -> Self {
        Self {
            slot_capacity,
            ..Self::default()
        }
    }

    /// Applies the `RLDIST_SLOTS` override when it parses as a positive
    /// integer.
    pub fn with_env_override(mut self) -> Self {
        if let Some(n) = std::env::var(SLOTS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            if n >= 1 {
                self.slot_capacity = n;
            }
        }
        self
    }
}

/// One executed task, recorded when its body starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub actor: ActorId,
    /// Per-actor task ordinal.
    pub ordinal: u64,
    pub method: String,
}

thread_local! {
    static CURRENT_ACTOR: Cell<ActorId> = const { Cell::new(DRIVER) };
}

/// The actor whose thread is executing, or [`DRIVER`].
pub fn current_actor() -> ActorId {
    CURRENT_ACTOR.with(|c| c.get())
}

trait Control: Send + Sync {
    fn stop(&self, id: ActorId);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Queued,
    Running,
}

struct ActorEntry {
    parent: ActorId,
    children: Vec<ActorId>,
    claim: ResourceClaim,
    status: Status,
    control: Arc<dyn Control>,
    start: Option<Box<dyn FnOnce() + Send>>,
}

struct Scheduler {
    free_slots: usize,
    next_actor: ActorId,
    actors: BTreeMap<ActorId, ActorEntry>,
    queue: VecDeque<ActorId>,
    depth: HashMap<ActorId, usize>,
    max_depth: usize,
    shutdown: bool,
}

struct StoredObject {
    tag: TypeTag,
    bytes: Arc<Vec<u8>>,
    value: Arc<dyn Any + Send + Sync>,
}

struct Inner {
    config: Mutex<RuntimeConfig>,
    sched: Mutex<Scheduler>,
    objects: Mutex<HashMap<ObjectId, StoredObject>>,
    next_object: AtomicU64,
    next_task: AtomicU64,
    completion_seq: AtomicU64,
    serializations: AtomicU64,
    fetched: Mutex<BTreeMap<(ActorId, TypeTag), u64>>,
    put_bytes: Mutex<BTreeMap<(ActorId, TypeTag), u64>>,
    generation: Mutex<u64>,
    completed: Condvar,
    trace: Mutex<Vec<TraceEntry>>,
}

/// Cheap, cloneable handle to a runtime.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").field("free_slots", &self.free_slots()).finish()
    }
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Self {
        assert!(config.slot_capacity >= 1, "slot capacity must be positive");
        let mut depth = HashMap::new();
        depth.insert(DRIVER, 1);
        Self {
            inner: Arc::new(Inner {
                sched: Mutex::new(Scheduler {
                    free_slots: config.slot_capacity,
                    next_actor: 1,
                    actors: BTreeMap::new(),
                    queue: VecDeque::new(),
                    depth,
                    max_depth: 1,
                    shutdown: false,
                }),
                config: Mutex::new(config),
                objects: Mutex::new(HashMap::new()),
                next_object: AtomicU64::new(1),
                next_task: AtomicU64::new(1),
                completion_seq: AtomicU64::new(1),
                serializations: AtomicU64::new(0),
                fetched: Mutex::new(BTreeMap::new()),
                put_bytes: Mutex::new(BTreeMap::new()),
                generation: Mutex::new(0),
                completed: Condvar::new(),
                trace: Mutex::new(Vec::new()),
            }),
        }
    }

    /// Default configuration with the `RLDIST_SLOTS` override applied.
    pub fn from_env() -> Self {
        Self::new(RuntimeConfig::default().with_env_override())
    }

    pub fn config(&self) -> RuntimeConfig {
        lock(&self.inner.config).clone()
    }

    pub fn slot_capacity(&self) -> usize {
        lock(&self.inner.config).slot_capacity
    }

    pub fn free_slots(&self) -> usize {
        lock(&self.inner.sched).free_slots
    }

    pub fn inject_straggler(&self, actor: ActorId, multiplier: f64) {
        lock(&self.inner.config).straggler_injection.insert(actor, multiplier);
    }

    pub fn clear_straggler(&self, actor: ActorId) {
        lock(&self.inner.config).straggler_injection.remove(&actor);
    }

    pub fn inject_failure(&self, actor: ActorId, schedule: FailureSchedule) {
        lock(&self.inner.config).failure_injection.insert(actor, schedule);
    }

    /// Spawns an actor owned by the driver. See [`ActorContext::spawn_actor`]
    /// for nested spawns.
    pub fn spawn_actor<A, F>(&self, claim: ResourceClaim, factory: F) -> Result<ActorRef<A>, RuntimeError>
    where
        A: Send + 'static,
        F: Fn(&ActorContext) -> Result<A, String> + Send + Sync + 'static,
    {
        self.spawn_with_parent(current_actor(), claim, Arc::new(factory))
    }

    fn spawn_with_parent<A: Send + 'static>(
        &self,
        parent: ActorId,
        claim: ResourceClaim,
        factory: Factory<A>,
    ) -> Result<ActorRef<A>, RuntimeError> {
        if claim.cpu_slots == 0 {
            return Err(RuntimeError::InvalidClaim);
        }
        let mailbox = Arc::new(Mailbox::<A>::new());
        let mut sched = lock(&self.inner.sched);
        if sched.shutdown {
            return Err(RuntimeError::RuntimeShutdown);
        }
        if claim.cpu_slots > self.slot_capacity() {
            return Err(RuntimeError::InvalidClaim);
        }
        let id = sched.next_actor;
        sched.next_actor += 1;
        let d = sched.depth.get(&parent).copied().unwrap_or(1) + 1;
        sched.depth.insert(id, d);
        sched.max_depth = sched.max_depth.max(d);
        if let Some(p) = sched.actors.get_mut(&parent) {
            p.children.push(id);
        }
        let start = {
            let rt = self.clone();
            let mailbox = mailbox.clone();
            Box::new(move || {
                let name = format!("actor-{id}");
                let spawned = thread::Builder::new()
                    .name(name)
                    .spawn(move || actor_main(rt, id, mailbox, factory));
                if let Err(e) = spawned {
                    panic!("failed to start actor thread: {e}");
                }
            }) as Box<dyn FnOnce() + Send>
        };
        sched.actors.insert(
            id,
            ActorEntry {
                parent,
                children: Vec::new(),
                claim,
                status: Status::Queued,
                control: mailbox.clone(),
                start: Some(start),
            },
        );
        sched.queue.push_back(id);
        let to_start = place_queued(&mut sched);
        drop(sched);
        to_start.into_iter().for_each(|f| f());
        Ok(ActorRef {
            shared: Arc::new(ActorShared {
                id,
                parent,
                claim,
                mailbox,
                rt: self.clone(),
            }),
        })
    }

    /// Stops an actor and, recursively, every actor it spawned. Queued and
    /// in-flight tasks fail with `ActorUnavailable`.
    pub fn terminate(&self, actor: ActorId) {
        let mut stack = vec![actor];
        let mut controls = Vec::new();
        {
            let mut sched = lock(&self.inner.sched);
            while let Some(id) = stack.pop() {
                if let Some(e) = sched.actors.get(&id) {
                    stack.extend(e.children.iter().copied());
                    controls.push((id, e.control.clone()));
                }
            }
            // queued actors never got a thread, so release them here
            let queued: Vec<ActorId> = controls
                .iter()
                .map(|(id, _)| *id)
                .filter(|id| sched.actors.get(id).is_some_and(|e| e.status == Status::Queued))
                .collect();
            for id in queued {
                sched.queue.retain(|q| *q != id);
                sched.actors.remove(&id);
            }
        }
        for (id, c) in controls {
            c.stop(id);
        }
        self.notify_completion();
    }

    /// Terminates every actor. Later spawns fail with `RuntimeShutdown`.
    pub fn shutdown(&self) {
        let roots: Vec<ActorId> = {
            let mut sched = lock(&self.inner.sched);
            sched.shutdown = true;
            sched.actors.keys().copied().collect()
        };
        for id in roots {
            self.terminate(id);
        }
    }

    /// Whether the actor currently holds slots and a thread.
    pub fn is_placed(&self, actor: ActorId) -> bool {
        lock(&self.inner.sched)
            .actors
            .get(&actor)
            .is_some_and(|e| e.status == Status::Running)
    }

    pub fn parent_of(&self, actor: ActorId) -> Option<ActorId> {
        lock(&self.inner.sched).actors.get(&actor).map(|e| e.parent)
    }

    pub fn live_actors(&self) -> Vec<ActorId> {
        lock(&self.inner.sched).actors.keys().copied().collect()
    }

    /// Deepest hierarchy level reached so far; the driver is level 1.
    pub fn max_depth(&self) -> usize {
        lock(&self.inner.sched).max_depth
    }

    fn on_actor_exit(&self, id: ActorId) {
        let to_start = {
            let mut sched = lock(&self.inner.sched);
            if let Some(e) = sched.actors.remove(&id) {
                if e.status == Status::Running {
                    sched.free_slots += e.claim.cpu_slots;
                }
                if let Some(p) = sched.actors.get_mut(&e.parent) {
                    p.children.retain(|c| *c != id);
                }
            }
            place_queued(&mut sched)
        };
        to_start.into_iter().for_each(|f| f());
        self.notify_completion();
    }

    fn notify_completion(&self) {
        *lock(&self.inner.generation) += 1;
        self.inner.completed.notify_all();
    }

    /// Blocks until the completion generation moves past `seen` or the
    /// deadline passes; returns the current generation.
    fn wait_generation(&self, seen: u64, deadline: Option<Instant>) -> u64 {
        let mut g = lock(&self.inner.generation);
        while *g == seen {
            match deadline {
                None => g = self.inner.completed.wait(g).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        break;
                    }
                    g = self
                        .inner
                        .completed
                        .wait_timeout(g, d - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
        *g
    }

    fn generation(&self) -> u64 {
        *lock(&self.inner.generation)
    }

    /// Returns once `k` of `futures` are ready (failed counts as ready) or
    /// `timeout` elapses. `ready` is in completion order; `pending` keeps
    /// input order.
    pub fn wait<R>(
        &self,
        futures: Vec<TaskFuture<R>>,
        k: usize,
        timeout: Option<Duration>,
    ) -> (Vec<TaskFuture<R>>, Vec<TaskFuture<R>>) {
        assert!(k <= futures.len(), "k exceeds the number of futures");
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let seen = self.generation();
            let ready_count = futures.iter().filter(|f| f.is_ready()).count();
            let expired = deadline.is_some_and(|d| Instant::now() >= d);
            if ready_count >= k || expired {
                let (mut ready, mut pending): (Vec<_>, Vec<_>) = futures.into_iter().partition(|f| f.is_ready());
                ready.sort_by_key(|f| f.completion_seq());
                if ready.len() > k {
                    pending.extend(ready.drain(k..));
                }
                return (ready, pending);
            }
            self.wait_generation(seen, deadline);
        }
    }

    /// Serializes `value` once and stores it; the handle can be fetched from
    /// any actor.
    pub fn put<T: Codec + Send + Sync + 'static>(&self, value: T) -> ObjectRef<T> {
        let bytes = value.to_frame();
        self.inner.serializations.fetch_add(1, Ordering::Relaxed);
        let id = self.inner.next_object.fetch_add(1, Ordering::Relaxed);
        let size = bytes.len() - HEADER_LEN;
        *lock(&self.inner.put_bytes).entry((current_actor(), T::TAG)).or_default() += size as u64;
        lock(&self.inner.objects).insert(
            id,
            StoredObject {
                tag: T::TAG,
                bytes: Arc::new(bytes),
                value: Arc::new(value),
            },
        );
        ObjectRef {
            token: Arc::new(ObjectToken {
                id,
                size_bytes: size,
                rt: Arc::downgrade(&self.inner),
            }),
            _type: PhantomData,
        }
    }

    /// Shared, uncopied access to a stored value.
    pub fn fetch<T: Codec + Send + Sync + 'static>(&self, r: &ObjectRef<T>) -> Result<Arc<T>, RuntimeError> {
        let (value, tag) = {
            let objects = lock(&self.inner.objects);
            let o = objects.get(&r.id()).ok_or(RuntimeError::UnknownObject(r.id()))?;
            (o.value.clone(), o.tag)
        };
        let typed = value.downcast::<T>().map_err(|_| RuntimeError::TypeMismatch(r.id()))?;
        *lock(&self.inner.fetched).entry((current_actor(), tag)).or_default() += r.size_bytes() as u64;
        Ok(typed)
    }

    /// The stored frame (header plus payload) exactly as serialized by `put`.
    pub fn fetch_bytes(&self, id: ObjectId) -> Result<Arc<Vec<u8>>, RuntimeError> {
        let (bytes, tag) = {
            let objects = lock(&self.inner.objects);
            let o = objects.get(&id).ok_or(RuntimeError::UnknownObject(id))?;
            (o.bytes.clone(), o.tag)
        };
        *lock(&self.inner.fetched).entry((current_actor(), tag)).or_default() += (bytes.len() - HEADER_LEN) as u64;
        Ok(bytes)
    }

    pub fn contains_object(&self, id: ObjectId) -> bool {
        lock(&self.inner.objects).contains_key(&id)
    }

    pub fn object_count(&self) -> usize {
        lock(&self.inner.objects).len()
    }

    /// Number of `put` serializations performed so far.
    pub fn serialization_count(&self) -> u64 {
        self.inner.serializations.load(Ordering::Relaxed)
    }

    /// Payload bytes `actor` has fetched from the store, per type tag name.
    pub fn fetched_bytes(&self, actor: ActorId) -> BTreeMap<String, u64> {
        lock(&self.inner.fetched)
            .iter()
            .filter(|((a, _), _)| *a == actor)
            .map(|((_, t), n)| (tag_name(*t), *n))
            .collect()
    }

    /// Payload bytes `actor` has put into the store, per type tag name.
    pub fn put_bytes(&self, actor: ActorId) -> BTreeMap<String, u64> {
        lock(&self.inner.put_bytes)
            .iter()
            .filter(|((a, _), _)| *a == actor)
            .map(|((_, t), n)| (tag_name(*t), *n))
            .collect()
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        lock(&self.inner.trace).clone()
    }

    pub fn clear_trace(&self) {
        lock(&self.inner.trace).clear();
    }

    fn record(&self, entry: TraceEntry) {
        lock(&self.inner.trace).push(entry);
    }
}

/// Starts queued spawns in FIFO order while the head of the queue fits.
fn place_queued(sched: &mut Scheduler) -> Vec<Box<dyn FnOnce() + Send>> {
    let mut out = Vec::new();
    while let Some(&id) = sched.queue.front() {
        let need = sched.actors[&id].claim.cpu_slots;
        if need > sched.free_slots {
            break;
        }
        sched.queue.pop_front();
        sched.free_slots -= need;
        let e = sched.actors.get_mut(&id).expect("queued actor has an entry");
        e.status = Status::Running;
        out.extend(e.start.take());
    }
    out
}

type Factory<A> = Arc<dyn Fn(&ActorContext) -> Result<A, String> + Send + Sync>;

/// Runs the method and returns the step that publishes its result, so that
/// injected service delays land before the caller observes completion.
type TaskBody<A> = Box<dyn FnOnce(Option<&mut A>, &ActorContext) -> Publish + Send>;

type Publish = Box<dyn FnOnce() + Send>;

struct Task<A> {
    method: String,
    body: TaskBody<A>,
}

struct MailboxState<A> {
    queue: VecDeque<Task<A>>,
    /// Every `ActorRef` was dropped; drain and exit.
    closed: bool,
    /// Terminated or permanently failed.
    dead: bool,
}

struct Mailbox<A> {
    state: Mutex<MailboxState<A>>,
    ready: Condvar,
}

impl<A> Mailbox<A> {
    fn new() -> Self {
        Self {
            state: Mutex::new(MailboxState {
                queue: VecDeque::new(),
                closed: false,
                dead: false,
            }),
            ready: Condvar::new(),
        }
    }

    fn push(&self, task: Task<A>) -> Result<(), Task<A>> {
        let mut s = lock(&self.state);
        if s.dead {
            return Err(task);
        }
        s.queue.push_back(task);
        self.ready.notify_one();
        Ok(())
    }

    fn next(&self) -> Option<Task<A>> {
        let mut s = lock(&self.state);
        loop {
            if s.dead {
                return None;
            }
            if let Some(t) = s.queue.pop_front() {
                return Some(t);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn close(&self) {
        lock(&self.state).closed = true;
        self.ready.notify_all();
    }

    /// Marks the mailbox dead and returns the tasks that will never run.
    fn kill(&self) -> Vec<Task<A>> {
        let mut s = lock(&self.state);
        s.dead = true;
        self.ready.notify_all();
        s.queue.drain(..).collect()
    }
}

impl<A: Send + 'static> Control for Mailbox<A> {
    fn stop(&self, _id: ActorId) {
        // tasks never started: run their bodies with no state so each
        // future fails with ActorUnavailable
        let ctx = ActorContext::detached();
        for t in self.kill() {
            (t.body)(None, &ctx)();
        }
    }
}

fn actor_main<A: Send + 'static>(rt: Runtime, id: ActorId, mailbox: Arc<Mailbox<A>>, factory: Factory<A>) {
    CURRENT_ACTOR.with(|c| c.set(id));
    let ctx = ActorContext { id, rt: Some(rt.clone()) };
    let mut state = factory(&ctx).ok();
    if state.is_none() {
        Control::stop(&*mailbox, id);
    }
    let mut ordinal = 0u64;
    while let Some(task) = mailbox.next() {
        let (multiplier, failure) = {
            let cfg = lock(&rt.inner.config);
            (
                cfg.straggler_injection.get(&id).copied(),
                cfg.failure_injection.get(&id).cloned(),
            )
        };
        let this = ordinal;
        ordinal += 1;
        if let Some(f) = failure.filter(|f| f.fail_on_tasks.contains(&this)) {
            state = None;
            (task.body)(None, &ctx)();
            if f.recoverable {
                state = factory(&ctx).ok();
            }
            if state.is_none() {
                Control::stop(&*mailbox, id);
                break;
            }
            continue;
        }
        rt.record(TraceEntry {
            actor: id,
            ordinal: this,
            method: task.method.clone(),
        });
        let started = Instant::now();
        let publish = (task.body)(state.as_mut(), &ctx);
        if let Some(m) = multiplier.filter(|m| *m > 1.0) {
            thread::sleep(started.elapsed().mul_f64(m - 1.0));
        }
        publish();
    }
    drop(state);
    rt.on_actor_exit(id);
}

/// Execution context handed to actor constructors and methods.
pub struct ActorContext {
    id: ActorId,
    rt: Option<Runtime>,
}

impl ActorContext {
    fn detached() -> Self {
        Self { id: DRIVER, rt: None }
    }

    pub fn actor_id(&self) -> ActorId {
        self.id
    }

    pub fn runtime(&self) -> &Runtime {
        self.rt.as_ref().expect("context of a running actor")
    }

    /// Spawns a child of this actor.
    pub fn spawn_actor<A, F>(&self, claim: ResourceClaim, factory: F) -> Result<ActorRef<A>, RuntimeError>
    where
        A: Send + 'static,
        F: Fn(&ActorContext) -> Result<A, String> + Send + Sync + 'static,
    {
        self.runtime().spawn_with_parent(self.id, claim, Arc::new(factory))
    }
}

struct ActorShared<A> {
    id: ActorId,
    parent: ActorId,
    claim: ResourceClaim,
    mailbox: Arc<Mailbox<A>>,
    rt: Runtime,
}

impl<A> Drop for ActorShared<A> {
    fn drop(&mut self) {
        self.mailbox.close();
    }
}

/// Typed handle to an actor. When the last handle drops, the actor finishes
/// its queued tasks and exits, releasing its slots.
pub struct ActorRef<A> {
    shared: Arc<ActorShared<A>>,
}

impl<A> Clone for ActorRef<A> {
    fn clone(&self) -> Self {
        Self {
            shared: self.shared.clone(),
        }
    }
}

impl<A> std::fmt::Debug for ActorRef<A> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActorRef")
            .field("id", &self.shared.id)
            .field("parent", &self.shared.parent)
            .finish()
    }
}

impl<A: Send + 'static> ActorRef<A> {
    pub fn id(&self) -> ActorId {
        self.shared.id
    }

    pub fn parent_id(&self) -> ActorId {
        self.shared.parent
    }

    pub fn claim(&self) -> ResourceClaim {
        self.shared.claim
    }

    pub fn runtime(&self) -> &Runtime {
        &self.shared.rt
    }

    /// Enqueues `method` on the actor's mailbox. Errors returned by the body
    /// surface as `MethodError`.
    pub fn invoke<R, E, F>(&self, method: &str, body: F) -> TaskFuture<R>
    where
        R: Send + Sync + 'static,
        E: Display,
        F: FnOnce(&mut A, &ActorContext) -> Result<R, E> + Send + 'static,
    {
        let rt = self.shared.rt.clone();
        let future = TaskFuture::new(rt.clone(), rt.inner.next_task.fetch_add(1, Ordering::Relaxed));
        let slot = future.clone();
        let actor = self.shared.id;
        let name = method.to_string();
        let task = Task {
            method: name.clone(),
            body: Box::new(move |state: Option<&mut A>, ctx: &ActorContext| {
                let result = match state {
                    None => Err(RuntimeError::ActorUnavailable(actor)),
                    Some(s) => body(s, ctx).map_err(|e| RuntimeError::MethodError {
                        actor,
                        method: name,
                        message: e.to_string(),
                    }),
                };
                Box::new(move || slot.complete(result)) as Publish
            }),
        };
        if let Err(task) = self.shared.mailbox.push(task) {
            (task.body)(None, &ActorContext::detached())();
        }
        future
    }

    /// Like [`invoke`](Self::invoke), but resolves `refs` to shared payloads
    /// on the actor before the body runs.
    pub fn invoke_with_refs<T, R, E, F>(&self, method: &str, refs: Vec<ObjectRef<T>>, body: F) -> TaskFuture<R>
    where
        T: Codec + Send + Sync + 'static,
        R: Send + Sync + 'static,
        E: Display,
        F: FnOnce(&mut A, &ActorContext, Vec<Arc<T>>) -> Result<R, E> + Send + 'static,
    {
        self.invoke(method, move |a: &mut A, ctx: &ActorContext| {
            let args = refs
                .iter()
                .map(|r| ctx.runtime().fetch(r))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            body(a, ctx, args).map_err(|e| e.to_string())
        })
    }

    pub fn terminate(&self) {
        self.shared.rt.terminate(self.shared.id);
    }

    pub fn is_placed(&self) -> bool {
        self.shared.rt.is_placed(self.shared.id)
    }
}

struct FutureState<R> {
    result: Option<Result<Arc<R>, RuntimeError>>,
    seq: u64,
}

/// Placeholder for a task's result. Resolves exactly once; `get` may be
/// called any number of times.
pub struct TaskFuture<R> {
    task_id: TaskId,
    state: Arc<Mutex<FutureState<R>>>,
    rt: Runtime,
}

impl<R> Clone for TaskFuture<R> {
    fn clone(&self) -> Self {
        Self {
            task_id: self.task_id,
            state: self.state.clone(),
            rt: self.rt.clone(),
        }
    }
}

impl<R> std::fmt::Debug for TaskFuture<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskFuture")
            .field("task_id", &self.task_id)
            .field("ready", &self.is_ready())
            .finish()
    }
}

impl<R> TaskFuture<R> {
    fn new(rt: Runtime, task_id: TaskId) -> Self {
        Self {
            task_id,
            state: Arc::new(Mutex::new(FutureState { result: None, seq: 0 })),
            rt,
        }
    }

    /// A future that is already resolved, for code paths that skip a task.
    pub fn ready(rt: &Runtime, value: Result<R, RuntimeError>) -> Self {
        let f = Self::new(rt.clone(), rt.inner.next_task.fetch_add(1, Ordering::Relaxed));
        f.complete(value);
        f
    }

    fn complete(&self, result: Result<R, RuntimeError>) {
        {
            let mut s = lock(&self.state);
            if s.result.is_some() {
                return;
            }
            s.result = Some(result.map(Arc::new));
            s.seq = self.rt.inner.completion_seq.fetch_add(1, Ordering::Relaxed);
        }
        self.rt.notify_completion();
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn is_ready(&self) -> bool {
        lock(&self.state).result.is_some()
    }

    /// Global completion order; 0 while pending.
    pub fn completion_seq(&self) -> u64 {
        lock(&self.state).seq
    }

    /// Blocks until resolved and returns the shared result.
    pub fn get_arc(&self) -> Result<Arc<R>, RuntimeError> {
        loop {
            let seen = self.rt.generation();
            if let Some(r) = lock(&self.state).result.clone() {
                return r;
            }
            self.rt.wait_generation(seen, None);
        }
    }

    /// Like [`get_arc`](Self::get_arc) with a deadline; `None` on timeout.
    pub fn get_timeout(&self, timeout: Duration) -> Option<Result<Arc<R>, RuntimeError>> {
        let deadline = Instant::now() + timeout;
        loop {
            let seen = self.rt.generation();
            if let Some(r) = lock(&self.state).result.clone() {
                return Some(r);
            }
            if Instant::now() >= deadline {
                return None;
            }
            self.rt.wait_generation(seen, Some(deadline));
        }
    }
}

impl<R: Clone> TaskFuture<R> {
    pub fn get(&self) -> Result<R, RuntimeError> {
        self.get_arc().map(|r| (*r).clone())
    }
}

struct ObjectToken {
    id: ObjectId,
    size_bytes: usize,
    rt: Weak<Inner>,
}

impl Drop for ObjectToken {
    fn drop(&mut self) {
        if let Some(inner) = self.rt.upgrade() {
            lock(&inner.objects).remove(&self.id);
        }
    }
}

/// Handle to an immutable stored value. The value is released when the last
/// handle drops.
pub struct ObjectRef<T> {
    token: Arc<ObjectToken>,
    _type: PhantomData<fn() -> T>,
}

impl<T> Clone for ObjectRef<T> {
    fn clone(&self) -> Self {
        Self {
            token: self.token.clone(),
            _type: PhantomData,
        }
    }
}

impl<T> std::fmt::Debug for ObjectRef<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObjectRef")
            .field("id", &self.token.id)
            .field("size_bytes", &self.token.size_bytes)
            .finish()
    }
}

impl<T> ObjectRef<T> {
    pub fn id(&self) -> ObjectId {
        self.token.id
    }

    /// Payload size, excluding the frame header.
    pub fn size_bytes(&self) -> usize {
        self.token.size_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    fn rt(slots: usize) -> Runtime {
        Runtime::new(RuntimeConfig::with_slots(slots))
    }

    #[test]
    fn echo_and_slot_bookkeeping() {
        let rt = rt(4);
        let a = rt.spawn_actor(ResourceClaim::slots(1), |_| Ok(Echo)).unwrap();
        assert_eq!(rt.free_slots(), 3);
        let f = a.invoke("echo", |_: &mut Echo, _| Ok::<_, String>(42));
        assert_eq!(f.get(), Ok(42));
        assert_eq!(f.get(), Ok(42));
    }

    #[test]
    fn zero_slot_claim_rejected() {
        let rt = rt(4);
        let r = rt.spawn_actor(ResourceClaim::slots(0), |_| Ok(Echo));
        assert_eq!(r.err(), Some(RuntimeError::InvalidClaim));
    }

    #[test]
    fn terminated_actor_is_unavailable() {
        let rt = rt(2);
        let a = rt.spawn_actor(ResourceClaim::default(), |_| Ok(Echo)).unwrap();
        a.terminate();
        let f = a.invoke("echo", |_: &mut Echo, _| Ok::<_, String>(1));
        assert_eq!(f.get(), Err(RuntimeError::ActorUnavailable(a.id())));
    }

    #[test]
    fn method_errors_surface() {
        let rt = rt(2);
        let a = rt.spawn_actor(ResourceClaim::default(), |_| Ok(Echo)).unwrap();
        let f = a.invoke("boom", |_: &mut Echo, _| Err::<u8, _>("bad input"));
        match f.get() {
            Err(RuntimeError::MethodError { method, message, .. }) => {
                assert_eq!(method, "boom");
                assert_eq!(message, "bad input");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wait_edge_cases() {
        let rt = rt(2);
        let fs: Vec<_> = (0..3).map(|i| TaskFuture::ready(&rt, Ok(i))).collect();
        let (r, p) = rt.wait(fs.clone(), 2, None);
        assert_eq!((r.len(), p.len()), (2, 1));
        let (r, p) = rt.wait(fs, 0, None);
        assert_eq!((r.len(), p.len()), (0, 3));
    }

    #[test]
    fn put_fetch_and_release() {
        let rt = rt(1);
        let r = rt.put(vec![1.0, 2.0, 3.0]);
        assert_eq!(*rt.fetch(&r).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(r.size_bytes(), 24);
        let id = r.id();
        drop(r);
        assert!(!rt.contains_object(id));
        assert_eq!(rt.fetch_bytes(id).err(), Some(RuntimeError::UnknownObject(id)));
    }

}
