//! Simulated grounding and execution of UMRF graphs.
//!
//! Grounding maps each node to a registered [`ActionSpec`] and checks its
//! parameters. Execution is a discrete simulation with unit-length steps:
//! a node becomes ready once every parent outside its own cycle has
//! completed, and again whenever a parent completes after its last start.
//! The smallest ready `(name, id)` runs next, so acyclic graphs execute in
//! tie-broken topological order and cyclic graphs loop until `max_steps`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::umrf::{cycle_members_by_component, validate_graph, NodeRef, UmrfGraph, ValueType, Violation, ViolationCode};

pub const DEFAULT_MAX_STEPS: usize = 1000;
/// Effects the simulator executes; both behave identically.
pub const SUPPORTED_EFFECTS: [&str; 2] = ["synchronous", "asynchronous"];

/// Simulated effect of an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Sets the pose from `x`, `y`, `yaw`.
    Navigate,
    /// Sets the arm posture from `posture` (or `default`).
    Manipulate,
    /// Increments the scan counter.
    Scan,
    /// Does nothing.
    Noop,
    /// Always fails; children never run.
    Fail,
}

impl Behavior {
    pub fn tag(self) -> &'static str {
        match self {
            Behavior::Navigate => "navigate",
            Behavior::Manipulate => "manipulate",
            Behavior::Scan => "scan",
            Behavior::Noop => "noop",
            Behavior::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    pub required_inputs: BTreeMap<String, ValueType>,
    #[serde(default)]
    pub optional_inputs: BTreeMap<String, ValueType>,
    pub behavior: Behavior,
}

impl ActionSpec {
    pub fn new(name: impl Into<String>, behavior: Behavior) -> Self {
        Self {
            name: name.into(),
            required_inputs: BTreeMap::new(),
            optional_inputs: BTreeMap::new(),
            behavior,
        }
    }

    pub fn require(mut self, param: &str, t: ValueType) -> Self {
        self.required_inputs.insert(param.to_string(), t);
        self
    }

    pub fn allow(mut self, param: &str, t: ValueType) -> Self {
        self.optional_inputs.insert(param.to_string(), t);
        self
    }
}

/// `navigation`, `manipulate` and `scan`.
pub fn builtin_registry() -> Vec<ActionSpec> {
    vec![
        ActionSpec::new("navigation", Behavior::Navigate)
            .require("x", ValueType::Number)
            .require("y", ValueType::Number)
            .require("yaw", ValueType::Number)
            .allow("location", ValueType::String),
        ActionSpec::new("manipulate", Behavior::Manipulate).allow("posture", ValueType::String),
        ActionSpec::new("scan", Behavior::Scan).allow("resolution", ValueType::String),
    ]
}

/// Reads a JSON array of action specs.
pub fn parse_registry(json: &str) -> Result<Vec<ActionSpec>, serde_json::Error> {
    serde_json::from_str(json)
}

/// Built-ins overridden (by name) and extended by `extra`.
pub fn merge_registry(extra: Vec<ActionSpec>) -> Vec<ActionSpec> {
    let mut by_name: BTreeMap<String, ActionSpec> = builtin_registry().into_iter().map(|s| (s.name.clone(), s)).collect();
    for s in extra {
        by_name.insert(s.name.clone(), s);
    }
    by_name.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub pose: Pose,
    pub scans_taken: u32,
    pub arm_posture: String,
}

impl Default for WorldState {
    fn default() -> Self {
        Self {
            pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 },
            scans_taken: 0,
            arm_posture: "stowed".to_string(),
        }
    }
}

/// A graph whose every node resolved to an action spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    graph: UmrfGraph,
    specs: BTreeMap<NodeRef, ActionSpec>,
}

impl Plan {
    /// A plan with no steps.
    pub fn empty() -> Self {
        Self {
            graph: UmrfGraph::new("empty"),
            specs: BTreeMap::new(),
        }
    }

    pub fn graph(&self) -> &UmrfGraph {
        &self.graph
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn spec(&self, node: &NodeRef) -> Option<&ActionSpec> {
        self.specs.get(node)
    }
}

/// Resolves every node against the registry. Structural violations of the
/// graph are reported first; grounding then adds one violation per unknown
/// action, missing or mistyped parameter, and unsupported effect.
pub fn ground_graph(graph: &UmrfGraph, registry: &[ActionSpec]) -> Result<Plan, Vec<Violation>> {
    let structural = validate_graph(graph);
    if !structural.is_empty() {
        return Err(structural);
    }
    let by_name: HashMap<&str, &ActionSpec> = registry.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut violations = Vec::new();
    let mut specs = BTreeMap::new();
    for node in &graph.nodes {
        let r = &node.node_ref;
        let Some(spec) = by_name.get(node.name()) else {
            violations.push(Violation::new(
                ViolationCode::UnknownAction,
                Some(r),
                format!("no registered action named `{}`", r.name),
            ));
            continue;
        };
        if !SUPPORTED_EFFECTS.contains(&node.effect.as_str()) {
            violations.push(Violation::new(
                ViolationCode::UnsupportedEffect,
                Some(r),
                format!("effect `{}` is not executable", node.effect),
            ));
        }
        for (param, t) in &spec.required_inputs {
            match node.input_parameters.get(param) {
                None => violations.push(Violation::new(
                    ViolationCode::MissingParameter,
                    Some(r),
                    format!("missing required input `{param}` ({t})"),
                )),
                Some(p) if p.value_type() != *t => violations.push(Violation::new(
                    ViolationCode::ParameterTypeMismatch,
                    Some(r),
                    format!("input `{param}` is {} but must be {t}", p.value_type()),
                )),
                Some(_) => {}
            }
        }
        for (param, t) in &spec.optional_inputs {
            if let Some(p) = node.input_parameters.get(param) {
                if p.value_type() != *t {
                    violations.push(Violation::new(
                        ViolationCode::ParameterTypeMismatch,
                        Some(r),
                        format!("input `{param}` is {} but must be {t}", p.value_type()),
                    ));
                }
            }
        }
        specs.insert(r.clone(), (*spec).clone());
    }
    if violations.is_empty() {
        Ok(Plan {
            graph: graph.clone(),
            specs,
        })
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub node: NodeRef,
    /// Behavior tag, e.g. `navigate`.
    pub action: String,
    pub start: f64,
    pub end: f64,
    pub state_after: WorldState,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Why and where a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub max_steps: usize,
    /// Nodes that were still ready to run.
    pub pending: Vec<NodeRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub final_state: WorldState,
    pub truncated: Option<Truncation>,
}

impl Trace {
    /// Behavior tags in execution order.
    pub fn actions(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.action.as_str()).collect()
    }

    /// One JSON object per event, then a `{"truncated": …}` line if the run
    /// hit its step limit.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        if let Some(t) = &self.truncated {
            serde_json::to_writer(&mut out, &serde_json::json!({ "truncated": t }))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn apply(behavior: Behavior, node: &crate::umrf::UmrfNode, state: &mut WorldState) -> Result<(), String> {
    let num = |k: &str| node.input_parameters.get(k).and_then(|p| p.value.as_number());
    match behavior {
        Behavior::Navigate => {
            let (Some(x), Some(y), Some(yaw)) = (num("x"), num("y"), num("yaw")) else {
                return Err("navigation needs numeric x, y and yaw".to_string());
            };
            state.pose = Pose { x, y, yaw };
        }
        Behavior::Manipulate => {
            state.arm_posture = node
                .input_parameters
                .get("posture")
                .and_then(|p| p.value.as_str())
                .unwrap_or("default")
                .to_string();
        }
        Behavior::Scan => state.scans_taken += 1,
        Behavior::Noop => {}
        Behavior::Fail => return Err("action failed".to_string()),
    }
    Ok(())
}

/// Runs the plan from `initial` for at most `max_steps` steps.
pub fn execute_graph(plan: &Plan, initial: WorldState, max_steps: usize) -> Trace {
    let graph = &plan.graph;
    let component = cycle_members_by_component(graph);
    let same_cycle = |a: &NodeRef, b: &NodeRef| match (component.get(a), component.get(b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    };
    let mut last_completed: HashMap<&NodeRef, usize> = HashMap::new();
    let mut last_started: HashMap<&NodeRef, usize> = HashMap::new();
    let mut state = initial;
    let mut events = Vec::new();

    let ready = |last_completed: &HashMap<&NodeRef, usize>, last_started: &HashMap<&NodeRef, usize>| {
        let mut set = BTreeSet::new();
        for node in &graph.nodes {
            let r = &node.node_ref;
            let required_done = node
                .parents
                .iter()
                .filter(|p| !same_cycle(p, r))
                .all(|p| last_completed.contains_key(p));
            if !required_done {
                continue;
            }
            let fresh = match last_started.get(r) {
                None => node.parents.is_empty() || node.parents.iter().any(|p| last_completed.contains_key(p)),
                Some(&s) => node.parents.iter().any(|p| last_completed.get(p).is_some_and(|&c| c > s)),
            };
            if fresh {
                set.insert(r);
            }
        }
        set
    };

    loop {
        let candidates = ready(&last_completed, &last_started);
        let Some(&next) = candidates.first() else { break };
        if events.len() >= max_steps {
            return Trace {
                events,
                final_state: state,
                truncated: Some(Truncation {
                    max_steps,
                    pending: candidates.into_iter().cloned().collect(),
                }),
            };
        }
        let step = events.len();
        let node = graph.node(next).expect("ready nodes exist");
        let spec = plan.specs.get(next).expect("grounded plan covers every node");
        last_started.insert(next, step);
        let (status, message) = match apply(spec.behavior, node, &mut state) {
            Ok(()) => {
                last_completed.insert(next, step);
                (Status::Ok, None)
            }
            Err(m) => (Status::Failed, Some(m)),
        };
        events.push(TraceEvent {
            step,
            node: next.clone(),
            action: spec.behavior.tag().to_string(),
            start: step as f64,
            end: (step + 1) as f64,
            state_after: state.clone(),
            status,
            message,
        });
    }
    Trace {
        events,
        final_state: state,
        truncated: None,
    }
}
