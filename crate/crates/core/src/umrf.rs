//! UMRF task graphs: parsing, validation, canonical serialization and ordering.
//!
//! A UMRF document is a JSON object with a `graph_name` and a list of
//! `umrf_actions`. Every action is identified by its `(name, id)` pair and
//! links to other actions through `parents` and `children` lists. The frozen
//! wire schema lives in `docs/umrf.schema.json`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Effect assigned to actions whose document omits `effect`.
pub const DEFAULT_EFFECT: &str = "synchronous";

/// Identifies one action instance inside a graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub name: String,
    pub id: u64,
}

impl NodeRef {
    pub fn new(name: impl Into<String>, id: u64) -> Self {
        Self {
            name: name.into(),
            id,
        }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.name, self.id)
    }
}

/// Declared kind of a parameter payload (`pvf_type` on the wire).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Number,
    String,
    Bool,
    NumberArray,
}

impl ValueType {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::Number => "number",
            ValueType::String => "string",
            ValueType::Bool => "bool",
            ValueType::NumberArray => "number_array",
        }
    }

    pub fn from_wire(s: &str) -> Option<Self> {
        match s {
            "number" => Some(ValueType::Number),
            "string" => Some(ValueType::String),
            "bool" => Some(ValueType::Bool),
            "number_array" => Some(ValueType::NumberArray),
            _ => None,
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameter payload. The variant fixes the `pvf_type`, so a value can never
/// disagree with its declared type.
#[derive(Debug, Clone, PartialEq)]
pub enum ParameterValue {
    Number(f64),
    String(String),
    Bool(bool),
    NumberArray(Vec<f64>),
}

impl ParameterValue {
    pub fn value_type(&self) -> ValueType {
        match self {
            ParameterValue::Number(_) => ValueType::Number,
            ParameterValue::String(_) => ValueType::String,
            ParameterValue::Bool(_) => ValueType::Bool,
            ParameterValue::NumberArray(_) => ValueType::NumberArray,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            ParameterValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParameterValue::String(s) => Some(s),
            _ => None,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            ParameterValue::Number(v) => v.is_finite(),
            ParameterValue::NumberArray(vs) => vs.iter().all(|v| v.is_finite()),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: ParameterValue,
    /// Unknown fields kept by lenient parsing, in document order.
    pub extra: Map<String, Value>,
}

impl Parameter {
    pub fn number(v: f64) -> Self {
        ParameterValue::Number(v).into()
    }

    pub fn string(s: impl Into<String>) -> Self {
        ParameterValue::String(s.into()).into()
    }

    pub fn boolean(b: bool) -> Self {
        ParameterValue::Bool(b).into()
    }

    pub fn number_array(vs: Vec<f64>) -> Self {
        ParameterValue::NumberArray(vs).into()
    }

    pub fn value_type(&self) -> ValueType {
        self.value.value_type()
    }
}

impl From<ParameterValue> for Parameter {
    fn from(value: ParameterValue) -> Self {
        Self {
            value,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UmrfNode {
    pub node_ref: NodeRef,
    pub effect: String,
    pub input_parameters: BTreeMap<String, Parameter>,
    pub output_parameters: BTreeMap<String, Parameter>,
    pub parents: Vec<NodeRef>,
    pub children: Vec<NodeRef>,
    pub extra: Map<String, Value>,
}

impl UmrfNode {
    pub fn new(name: impl Into<String>, id: u64) -> Self {
        Self {
            node_ref: NodeRef::new(name, id),
            effect: DEFAULT_EFFECT.to_string(),
            input_parameters: BTreeMap::new(),
            output_parameters: BTreeMap::new(),
            parents: Vec::new(),
            children: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn with_input(mut self, name: impl Into<String>, p: Parameter) -> Self {
        self.input_parameters.insert(name.into(), p);
        self
    }

    pub fn name(&self) -> &str {
        &self.node_ref.name
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UmrfGraph {
    pub graph_name: String,
    pub nodes: Vec<UmrfNode>,
    pub extra: Map<String, Value>,
}

impl UmrfGraph {
    pub fn new(graph_name: impl Into<String>) -> Self {
        Self {
            graph_name: graph_name.into(),
            nodes: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn with_node(mut self, node: UmrfNode) -> Self {
        self.nodes.push(node);
        self
    }

    /// Adds a mutually consistent parent→child link. Unknown refs are ignored.
    pub fn link(&mut self, parent: &NodeRef, child: &NodeRef) {
        if let Some(p) = self.nodes.iter_mut().find(|n| &n.node_ref == parent) {
            p.children.push(child.clone());
        }
        if let Some(c) = self.nodes.iter_mut().find(|n| &n.node_ref == child) {
            c.parents.push(parent.clone());
        }
    }

    /// Builds a chain graph linking `nodes` in the given order.
    pub fn chain(graph_name: impl Into<String>, nodes: Vec<UmrfNode>) -> Self {
        let refs: Vec<NodeRef> = nodes.iter().map(|n| n.node_ref.clone()).collect();
        let mut g = Self {
            graph_name: graph_name.into(),
            nodes,
            extra: Map::new(),
        };
        for pair in refs.windows(2) {
            g.link(&pair[0], &pair[1]);
        }
        g
    }

    pub fn node(&self, r: &NodeRef) -> Option<&UmrfNode> {
        self.nodes.iter().find(|n| &n.node_ref == r)
    }

    pub fn entry_nodes(&self) -> impl Iterator<Item = &UmrfNode> {
        self.nodes.iter().filter(|n| n.parents.is_empty())
    }

    /// Directed edges `(parent, child)` declared from either side, deduplicated.
    /// Links to unknown nodes are skipped.
    pub fn edges(&self) -> Vec<(NodeRef, NodeRef)> {
        let known: HashSet<&NodeRef> = self.nodes.iter().map(|n| &n.node_ref).collect();
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            for c in &n.children {
                if known.contains(c) {
                    seen.insert((n.node_ref.clone(), c.clone()));
                }
            }
            for p in &n.parents {
                if known.contains(p) {
                    seen.insert((p.clone(), n.node_ref.clone()));
                }
            }
        }
        seen.into_iter().collect()
    }
}

/// Closed set of problems reported by [`validate_graph`] and by action grounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    EmptyGraph,
    DuplicateNode,
    SelfLink,
    DuplicateLink,
    DanglingLink,
    InconsistentLink,
    NoEntryNode,
    UnreachableNode,
    NonFiniteParameter,
    UnknownAction,
    MissingParameter,
    ParameterTypeMismatch,
    UnsupportedEffect,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::EmptyGraph => "empty_graph",
            ViolationCode::DuplicateNode => "duplicate_node",
            ViolationCode::SelfLink => "self_link",
            ViolationCode::DuplicateLink => "duplicate_link",
            ViolationCode::DanglingLink => "dangling_link",
            ViolationCode::InconsistentLink => "inconsistent_link",
            ViolationCode::NoEntryNode => "no_entry_node",
            ViolationCode::UnreachableNode => "unreachable_node",
            ViolationCode::NonFiniteParameter => "non_finite_parameter",
            ViolationCode::UnknownAction => "unknown_action",
            ViolationCode::MissingParameter => "missing_parameter",
            ViolationCode::ParameterTypeMismatch => "parameter_type_mismatch",
            ViolationCode::UnsupportedEffect => "unsupported_effect",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub node: Option<NodeRef>,
    pub message: String,
}

impl Violation {
    pub fn new(code: ViolationCode, node: Option<&NodeRef>, message: impl Into<String>) -> Self {
        Self {
            code,
            node: node.cloned(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "[{}] {}: {}", self.code, n, self.message),
            None => write!(f, "[{}] {}", self.code, self.message),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Unknown fields are schema errors.
    #[default]
    Strict,
    /// Unknown fields on the graph, actions and parameters are kept verbatim.
    /// Unknown fields inside `parents`/`children` references are dropped.
    Lenient,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("JSON syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
}

#[derive(Debug, thiserror::Error)]
#[error("graph has {} violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
pub struct InvalidGraph(pub Vec<Violation>);

/// Parses a UMRF document in strict mode.
pub fn parse_graph(json_text: &str) -> Result<UmrfGraph, ParseError> {
    parse_graph_with(json_text, ParseMode::Strict)
}

pub fn parse_graph_with(json_text: &str, mode: ParseMode) -> Result<UmrfGraph, ParseError> {
    let doc: Value = serde_json::from_str(json_text).map_err(|e| ParseError::Syntax {
        offset: byte_offset(json_text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    GraphReader { mode }.graph(&doc)
}

/// Reads a graph from an already decoded JSON value (e.g. embedded in a JSON-lines record).
pub fn graph_from_value(doc: &Value, mode: ParseMode) -> Result<UmrfGraph, ParseError> {
    GraphReader { mode }.graph(doc)
}

/// Canonical JSON value of a graph, without validation.
pub fn graph_to_json(graph: &UmrfGraph) -> Value {
    graph_to_value(graph)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn schema(path: &str, message: impl Into<String>) -> ParseError {
    ParseError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

struct GraphReader {
    mode: ParseMode,
}

impl GraphReader {
    fn object<'a>(&self, v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ParseError> {
        v.as_object()
            .ok_or_else(|| schema(path, format!("expected object, found {}", kind_of(v))))
    }

    /// Splits `obj` into known fields and unknown extras, enforcing strictness.
    fn extras(
        &self,
        obj: &Map<String, Value>,
        known: &[&str],
        path: &str,
    ) -> Result<Map<String, Value>, ParseError> {
        let mut extra = Map::new();
        for (k, v) in obj {
            if !known.contains(&k.as_str()) {
                if self.mode == ParseMode::Strict {
                    return Err(schema(&format!("{path}.{k}"), "unknown field"));
                }
                extra.insert(k.clone(), v.clone());
            }
        }
        Ok(extra)
    }

    fn graph(&self, doc: &Value) -> Result<UmrfGraph, ParseError> {
        let obj = self.object(doc, "$")?;
        let extra = self.extras(obj, &["graph_name", "umrf_actions"], "$")?;
        let graph_name = required_str(obj, "graph_name", "$")?;
        let actions = obj
            .get("umrf_actions")
            .ok_or_else(|| schema("$.umrf_actions", "missing required field"))?
            .as_array()
            .ok_or_else(|| schema("$.umrf_actions", "expected array"))?;
        if actions.is_empty() {
            return Err(schema("$.umrf_actions", "graph must contain at least one action"));
        }
        let nodes = actions
            .iter()
            .enumerate()
            .map(|(i, a)| self.node(a, &format!("$.umrf_actions[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(UmrfGraph {
            graph_name,
            nodes,
            extra,
        })
    }

    fn node(&self, v: &Value, path: &str) -> Result<UmrfNode, ParseError> {
        const KNOWN: &[&str] = &[
            "name",
            "id",
            "effect",
            "input_parameters",
            "output_parameters",
            "parents",
            "children",
        ];
        let obj = self.object(v, path)?;
        let extra = self.extras(obj, KNOWN, path)?;
        let node_ref = self.node_ref_fields(obj, path)?;
        let effect = match obj.get("effect") {
            None => DEFAULT_EFFECT.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(other) => {
                return Err(schema(
                    &format!("{path}.effect"),
                    format!("expected string, found {}", kind_of(other)),
                ))
            }
        };
        Ok(UmrfNode {
            node_ref,
            effect,
            input_parameters: self.parameters(obj.get("input_parameters"), &format!("{path}.input_parameters"))?,
            output_parameters: self.parameters(obj.get("output_parameters"), &format!("{path}.output_parameters"))?,
            parents: self.links(obj.get("parents"), &format!("{path}.parents"))?,
            children: self.links(obj.get("children"), &format!("{path}.children"))?,
            extra,
        })
    }

    fn node_ref_fields(&self, obj: &Map<String, Value>, path: &str) -> Result<NodeRef, ParseError> {
        let name = required_str(obj, "name", path)?;
        let id = obj
            .get("id")
            .ok_or_else(|| schema(&format!("{path}.id"), "missing required field"))?;
        let id = id
            .as_u64()
            .ok_or_else(|| schema(&format!("{path}.id"), "expected non-negative integer"))?;
        Ok(NodeRef { name, id })
    }

    fn links(&self, v: Option<&Value>, path: &str) -> Result<Vec<NodeRef>, ParseError> {
        let Some(v) = v else { return Ok(Vec::new()) };
        let arr = v
            .as_array()
            .ok_or_else(|| schema(path, format!("expected array, found {}", kind_of(v))))?;
        arr.iter()
            .enumerate()
            .map(|(i, item)| {
                let p = format!("{path}[{i}]");
                let obj = self.object(item, &p)?;
                if self.mode == ParseMode::Strict {
                    self.extras(obj, &["name", "id"], &p)?;
                }
                self.node_ref_fields(obj, &p)
            })
            .collect()
    }

    fn parameters(
        &self,
        v: Option<&Value>,
        path: &str,
    ) -> Result<BTreeMap<String, Parameter>, ParseError> {
        let Some(v) = v else { return Ok(BTreeMap::new()) };
        let obj = self.object(v, path)?;
        obj.iter()
            .map(|(k, pv)| {
                let p = format!("{path}.{k}");
                Ok((k.clone(), self.parameter(pv, &p)?))
            })
            .collect()
    }

    fn parameter(&self, v: &Value, path: &str) -> Result<Parameter, ParseError> {
        let obj = self.object(v, path)?;
        let extra = self.extras(obj, &["pvf_type", "pvf_value"], path)?;
        let type_path = format!("{path}.pvf_type");
        let value_path = format!("{path}.pvf_value");
        let ty = obj
            .get("pvf_type")
            .ok_or_else(|| schema(&type_path, "missing required field"))?
            .as_str()
            .ok_or_else(|| schema(&type_path, "expected string"))?;
        let ty = ValueType::from_wire(ty)
            .ok_or_else(|| schema(&type_path, format!("unknown parameter type `{ty}`")))?;
        let raw = obj
            .get("pvf_value")
            .ok_or_else(|| schema(&value_path, "missing required field"))?;
        let mismatch = || schema(&value_path, format!("value does not match pvf_type `{ty}`"));
        let value = match ty {
            ValueType::Number => ParameterValue::Number(raw.as_f64().ok_or_else(mismatch)?),
            ValueType::String => ParameterValue::String(raw.as_str().ok_or_else(mismatch)?.to_string()),
            ValueType::Bool => ParameterValue::Bool(raw.as_bool().ok_or_else(mismatch)?),
            ValueType::NumberArray => ParameterValue::NumberArray(
                raw.as_array()
                    .ok_or_else(mismatch)?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(mismatch))
                    .collect::<Result<_, _>>()?,
            ),
        };
        Ok(Parameter { value, extra })
    }
}

fn required_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, ParseError> {
    let p = format!("{path}.{key}");
    match obj.get(key) {
        None => Err(schema(&p, "missing required field")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(schema(&p, format!("expected string, found {}", kind_of(other)))),
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Checks every structural invariant of a graph. Cycles and fan-out are legal.
pub fn validate_graph(graph: &UmrfGraph) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();
    if graph.nodes.is_empty() {
        out.push(Violation::new(EmptyGraph, None, "graph has no actions"));
        return out;
    }

    let mut by_ref: HashMap<&NodeRef, &UmrfNode> = HashMap::new();
    for n in &graph.nodes {
        if by_ref.insert(&n.node_ref, n).is_some() {
            out.push(Violation::new(
                DuplicateNode,
                Some(&n.node_ref),
                format!("({}, {}) appears more than once", n.node_ref.name, n.node_ref.id),
            ));
        }
    }

    for n in &graph.nodes {
        let me = &n.node_ref;
        for (label, list) in [("parents", &n.parents), ("children", &n.children)] {
            let mut seen = HashSet::new();
            for r in list.iter() {
                if r == me {
                    out.push(Violation::new(SelfLink, Some(me), format!("{label} lists the node itself")));
                } else if !seen.insert(r) {
                    out.push(Violation::new(DuplicateLink, Some(me), format!("{label} lists {r} twice")));
                } else if !by_ref.contains_key(r) {
                    out.push(Violation::new(DanglingLink, Some(me), format!("{label} references unknown node {r}")));
                }
            }
        }
        for c in &n.children {
            if c == me {
                continue;
            }
            if let Some(child) = by_ref.get(c) {
                if !child.parents.contains(me) {
                    out.push(Violation::new(
                        InconsistentLink,
                        Some(me),
                        format!("lists {c} as child but {c} does not list {me} as parent"),
                    ));
                }
            }
        }
        for p in &n.parents {
            if p == me {
                continue;
            }
            if let Some(parent) = by_ref.get(p) {
                if !parent.children.contains(me) {
                    out.push(Violation::new(
                        InconsistentLink,
                        Some(me),
                        format!("lists {p} as parent but {p} does not list {me} as child"),
                    ));
                }
            }
        }
        for (label, params) in [("input", &n.input_parameters), ("output", &n.output_parameters)] {
            for (k, p) in params {
                if !p.value.is_finite() {
                    out.push(Violation::new(
                        NonFiniteParameter,
                        Some(me),
                        format!("{label} parameter `{k}` is not finite"),
                    ));
                }
            }
        }
    }

    let entries: Vec<&NodeRef> = graph.entry_nodes().map(|n| &n.node_ref).collect();
    if entries.is_empty() {
        out.push(Violation::new(NoEntryNode, None, "every action has a parent; no entry action"));
        return out;
    }

    let edges = graph.edges();
    let mut adj: HashMap<&NodeRef, Vec<&NodeRef>> = HashMap::new();
    for (p, c) in &edges {
        adj.entry(p).or_default().push(c);
    }
    let mut reached: HashSet<&NodeRef> = entries.iter().copied().collect();
    let mut queue: VecDeque<&NodeRef> = entries.into_iter().collect();
    while let Some(r) = queue.pop_front() {
        for c in adj.get(r).into_iter().flatten() {
            if reached.insert(c) {
                queue.push_back(c);
            }
        }
    }
    for n in &graph.nodes {
        if !reached.contains(&n.node_ref) {
            out.push(Violation::new(
                UnreachableNode,
                Some(&n.node_ref),
                "no path from any entry action",
            ));
        }
    }
    out
}

/// Result of [`topological_order`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopoOrder {
    /// Every parent precedes its children; ties broken by `(name, id)`.
    Acyclic(Vec<NodeRef>),
    /// Nodes that lie on at least one cycle.
    Cyclic(BTreeSet<NodeRef>),
}

pub fn topological_order(graph: &UmrfGraph) -> TopoOrder {
    let edges = graph.edges();
    let mut indegree: BTreeMap<&NodeRef, usize> = graph.nodes.iter().map(|n| (&n.node_ref, 0)).collect();
    let mut adj: HashMap<&NodeRef, Vec<&NodeRef>> = HashMap::new();
    for (p, c) in &edges {
        *indegree.get_mut(c).expect("edge endpoints are known nodes") += 1;
        adj.entry(p).or_default().push(c);
    }
    let mut ready: BTreeSet<&NodeRef> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(r, _)| *r)
        .collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(r) = ready.pop_first() {
        order.push(r.clone());
        for c in adj.get(r).into_iter().flatten() {
            let d = indegree.get_mut(c).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == indegree.len() {
        return TopoOrder::Acyclic(order);
    }
    TopoOrder::Cyclic(cycle_members(graph, &edges))
}

/// Nodes inside a strongly connected component with a cycle.
pub(crate) fn cycle_members(graph: &UmrfGraph, edges: &[(NodeRef, NodeRef)]) -> BTreeSet<NodeRef> {
    cyclic_components(graph, edges).into_keys().collect()
}

/// Maps every node on a cycle to an identifier of its strongly connected
/// component; nodes of the same cycle share the identifier.
pub(crate) fn cycle_members_by_component(graph: &UmrfGraph) -> HashMap<NodeRef, usize> {
    cyclic_components(graph, &graph.edges()).into_iter().collect()
}

fn cyclic_components(graph: &UmrfGraph, edges: &[(NodeRef, NodeRef)]) -> BTreeMap<NodeRef, usize> {
    let mut g = petgraph::graph::DiGraph::<&NodeRef, ()>::new();
    let idx: HashMap<&NodeRef, _> = graph
        .nodes
        .iter()
        .map(|n| (&n.node_ref, g.add_node(&n.node_ref)))
        .collect();
    for (p, c) in edges {
        if let (Some(&a), Some(&b)) = (idx.get(p), idx.get(c)) {
            g.add_edge(a, b, ());
        }
    }
    let mut members = BTreeMap::new();
    for (component, scc) in petgraph::algo::tarjan_scc(&g).into_iter().enumerate() {
        let cyclic = scc.len() > 1 || g.contains_edge(scc[0], scc[0]);
        if cyclic {
            members.extend(scc.into_iter().map(|i| (g[i].clone(), component)));
        }
    }
    members
}

/// Renders the canonical document for a valid graph.
///
/// Canonical form: graph keys `graph_name`, `umrf_actions`; action keys
/// `name`, `id`, `effect`, `input_parameters`, `output_parameters`,
/// `parents`, `children`; parameters sorted by name as
/// `{"pvf_type", "pvf_value"}`; extras kept by lenient parsing follow the
/// fixed keys in document order. Two-space indentation, integral numbers
/// below 1e15 written without a fraction, other numbers in shortest
/// round-trip form. No trailing newline.
pub fn serialize_graph(graph: &UmrfGraph) -> Result<String, InvalidGraph> {
    let violations = validate_graph(graph);
    if !violations.is_empty() {
        return Err(InvalidGraph(violations));
    }
    Ok(to_canonical_string(graph))
}

pub(crate) fn to_canonical_string(graph: &UmrfGraph) -> String {
    let doc = graph_to_value(graph);
    serde_json::to_string_pretty(&doc).expect("canonical document is serializable")
}

fn graph_to_value(graph: &UmrfGraph) -> Value {
    let mut obj = Map::new();
    obj.insert("graph_name".into(), Value::String(graph.graph_name.clone()));
    obj.insert(
        "umrf_actions".into(),
        Value::Array(graph.nodes.iter().map(node_to_value).collect()),
    );
    append_extra(&mut obj, &graph.extra);
    Value::Object(obj)
}

fn node_to_value(n: &UmrfNode) -> Value {
    let mut obj = Map::new();
    obj.insert("name".into(), Value::String(n.node_ref.name.clone()));
    obj.insert("id".into(), Value::from(n.node_ref.id));
    obj.insert("effect".into(), Value::String(n.effect.clone()));
    obj.insert("input_parameters".into(), params_to_value(&n.input_parameters));
    obj.insert("output_parameters".into(), params_to_value(&n.output_parameters));
    obj.insert("parents".into(), refs_to_value(&n.parents));
    obj.insert("children".into(), refs_to_value(&n.children));
    append_extra(&mut obj, &n.extra);
    Value::Object(obj)
}

fn params_to_value(params: &BTreeMap<String, Parameter>) -> Value {
    let mut obj = Map::new();
    for (k, p) in params {
        let mut po = Map::new();
        po.insert("pvf_type".into(), Value::String(p.value_type().as_str().into()));
        let v = match &p.value {
            ParameterValue::Number(x) => canonical_number(*x),
            ParameterValue::String(s) => Value::String(s.clone()),
            ParameterValue::Bool(b) => Value::Bool(*b),
            ParameterValue::NumberArray(xs) => Value::Array(xs.iter().map(|x| canonical_number(*x)).collect()),
        };
        po.insert("pvf_value".into(), v);
        append_extra(&mut po, &p.extra);
        obj.insert(k.clone(), Value::Object(po));
    }
    Value::Object(obj)
}

fn refs_to_value(refs: &[NodeRef]) -> Value {
    Value::Array(
        refs.iter()
            .map(|r| {
                let mut o = Map::new();
                o.insert("name".into(), Value::String(r.name.clone()));
                o.insert("id".into(), Value::from(r.id));
                Value::Object(o)
            })
            .collect(),
    )
}

fn append_extra(obj: &mut Map<String, Value>, extra: &Map<String, Value>) {
    for (k, v) in extra {
        obj.insert(k.clone(), v.clone());
    }
}

pub(crate) fn canonical_number(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        Value::from(x as i64)
    } else {
        serde_json::Number::from_f64(x)
            .map(Value::Number)
            .unwrap_or(Value::Null)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inspection_doc() -> &'static str {
        r#"{
  "graph_name": "inspect_area",
  "umrf_actions": [
    {"name": "navigation", "id": 0,
     "input_parameters": {"x": {"pvf_type": "number", "pvf_value": 1.5},
                          "y": {"pvf_type": "number", "pvf_value": -2},
                          "yaw": {"pvf_type": "number", "pvf_value": 0.3}},
     "children": [{"name": "scan", "id": 0}]},
    {"name": "scan", "id": 0,
     "input_parameters": {"resolution": {"pvf_type": "string", "pvf_value": "low"}},
     "parents": [{"name": "navigation", "id": 0}],
     "children": [{"name": "scan", "id": 1}]},
    {"name": "scan", "id": 1,
     "input_parameters": {"resolution": {"pvf_type": "string", "pvf_value": "high"}},
     "parents": [{"name": "scan", "id": 0}]}
  ]
}"#
    }

    #[test]
    fn parses_three_step_inspection() {
        let g = parse_graph(inspection_doc()).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.nodes[0].effect, DEFAULT_EFFECT);
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn empty_action_list_is_schema_error() {
        let err = parse_graph(r#"{"graph_name": "g", "umrf_actions": []}"#).unwrap_err();
        assert!(matches!(err, ParseError::Schema { ref path, .. } if path == "$.umrf_actions"));
    }

    #[test]
    fn syntax_error_reports_byte_offset() {
        let text = "{\n  \"graph_name\": \"g\",\n  oops\n}";
        match parse_graph(text).unwrap_err() {
            ParseError::Syntax { offset, .. } => assert_eq!(&text[offset..offset + 1], "o"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_error_names_path() {
        let text = r#"{"graph_name": "g", "umrf_actions": [{"name": "a", "id": 0,
            "input_parameters": {"x": {"pvf_type": "number", "pvf_value": "ten"}}}]}"#;
        let err = parse_graph(text).unwrap_err();
        assert_eq!(
            err,
            ParseError::Schema {
                path: "$.umrf_actions[0].input_parameters.x.pvf_value".into(),
                message: "value does not match pvf_type `number`".into()
            }
        );
        let neg = parse_graph(r#"{"graph_name": "g", "umrf_actions": [{"name": "a", "id": -1}]}"#);
        assert!(matches!(neg, Err(ParseError::Schema { ref path, .. }) if path == "$.umrf_actions[0].id"));
    }

    #[test]
    fn strict_rejects_unknown_fields_lenient_keeps_them() {
        let text = r#"{"graph_name": "g", "notes": "hi",
            "umrf_actions": [{"name": "scan", "id": 0, "priority": 3}]}"#;
        let err = parse_graph(text).unwrap_err();
        assert!(matches!(err, ParseError::Schema { ref path, .. } if path == "$.notes"));

        let g = parse_graph_with(text, ParseMode::Lenient).unwrap();
        assert_eq!(g.extra["notes"], "hi");
        assert_eq!(g.nodes[0].extra["priority"], 3);
        let out = serialize_graph(&g).unwrap();
        let again = parse_graph_with(&out, ParseMode::Lenient).unwrap();
        assert_eq!(again, g);
        assert_eq!(serialize_graph(&again).unwrap(), out);
    }

    #[test]
    fn missing_back_link_is_one_violation() {
        // a lists b as child, b omits a as parent.
        let text = r#"{"graph_name": "g", "umrf_actions": [
            {"name": "a", "id": 0, "children": [{"name": "b", "id": 0}]},
            {"name": "b", "id": 0}]}"#;
        let g = parse_graph(text).unwrap();
        let v = validate_graph(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].code, ViolationCode::InconsistentLink);
        assert_eq!(v[0].node, Some(NodeRef::new("a", 0)));
    }

    #[test]
    fn cycles_with_entry_are_valid() {
        let (e, a, b) = (NodeRef::new("e", 0), NodeRef::new("a", 0), NodeRef::new("b", 0));
        let mut g = UmrfGraph::new("loop")
            .with_node(UmrfNode::new("e", 0))
            .with_node(UmrfNode::new("a", 0))
            .with_node(UmrfNode::new("b", 0));
        g.link(&e, &a);
        g.link(&a, &b);
        g.link(&b, &a);
        assert!(validate_graph(&g).is_empty());
        assert_eq!(
            topological_order(&g),
            TopoOrder::Cyclic([a.clone(), b.clone()].into_iter().collect())
        );
    }

    #[test]
    fn no_entry_node_is_single_violation() {
        let (a, b) = (NodeRef::new("a", 0), NodeRef::new("b", 0));
        let mut g = UmrfGraph::new("ring")
            .with_node(UmrfNode::new("a", 0))
            .with_node(UmrfNode::new("b", 0));
        g.link(&a, &b);
        g.link(&b, &a);
        let v = validate_graph(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, ViolationCode::NoEntryNode);
    }

    #[test]
    fn unreachable_dangling_duplicate_and_self_links() {
        let (a, b, c) = (NodeRef::new("a", 0), NodeRef::new("b", 0), NodeRef::new("c", 0));
        let mut g = UmrfGraph::new("bad")
            .with_node(UmrfNode::new("a", 0))
            .with_node(UmrfNode::new("b", 0))
            .with_node(UmrfNode::new("c", 0));
        // b and c form a parentless-free island: each has a parent, none reachable from a.
        g.link(&b, &c);
        g.link(&c, &b);
        let codes: Vec<_> = validate_graph(&g).into_iter().map(|v| v.code).collect();
        assert_eq!(codes, vec![ViolationCode::UnreachableNode, ViolationCode::UnreachableNode]);

        let mut g2 = UmrfGraph::new("g2").with_node(UmrfNode::new("a", 0));
        g2.nodes[0].children.push(NodeRef::new("ghost", 3));
        g2.nodes[0].children.push(a.clone());
        assert_eq!(
            validate_graph(&g2).into_iter().map(|v| v.code).collect::<Vec<_>>(),
            vec![ViolationCode::DanglingLink, ViolationCode::SelfLink]
        );

        let mut g3 = UmrfGraph::new("g3").with_node(UmrfNode::new("a", 0)).with_node(UmrfNode::new("a", 0));
        g3.nodes[1].parents.push(a.clone());
        let codes: Vec<_> = validate_graph(&g3).into_iter().map(|v| v.code).collect();
        assert!(codes.contains(&ViolationCode::DuplicateNode));
    }

    #[test]
    fn non_finite_parameters_refuse_serialization() {
        let g = UmrfGraph::new("g").with_node(UmrfNode::new("navigation", 0).with_input("x", Parameter::number(f64::NAN)));
        let err = serialize_graph(&g).unwrap_err();
        assert_eq!(err.0[0].code, ViolationCode::NonFiniteParameter);
    }

    #[test]
    fn serialize_is_canonical_and_idempotent() {
        let g = parse_graph(inspection_doc()).unwrap();
        let once = serialize_graph(&g).unwrap();
        let twice = serialize_graph(&parse_graph(&once).unwrap()).unwrap();
        assert_eq!(once, twice);
        assert!(once.contains("\"pvf_value\": -2\n"));
        assert!(once.starts_with("{\n  \"graph_name\": \"inspect_area\",\n  \"umrf_actions\": [\n    {\n      \"name\": \"navigation\","));
    }

    #[test]
    fn navigation_numbers_use_minimal_digits() {
        let g = UmrfGraph::new("move_to_main_hall").with_node(
            UmrfNode::new("navigation", 0)
                .with_input("x", Parameter::number(14.0))
                .with_input("y", Parameter::number(3.2))
                .with_input("yaw", Parameter::number(1.26)),
        );
        let out = serialize_graph(&g).unwrap();
        for needle in ["\"pvf_value\": 14\n", "\"pvf_value\": 3.2\n", "\"pvf_value\": 1.26\n"] {
            assert!(out.contains(needle), "{needle} missing in {out}");
        }
    }

    #[test]
    fn dangling_child_refuses_to_serialize() {
        let mut g = UmrfGraph::new("g").with_node(UmrfNode::new("a", 0));
        g.nodes[0].children.push(NodeRef::new("b", 0));
        let err = serialize_graph(&g).unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].code, ViolationCode::DanglingLink);
    }

    #[test]
    fn topo_orders() {
        let chain = parse_graph(inspection_doc()).unwrap();
        assert_eq!(
            topological_order(&chain),
            TopoOrder::Acyclic(vec![NodeRef::new("navigation", 0), NodeRef::new("scan", 0), NodeRef::new("scan", 1)])
        );

        let refs: Vec<NodeRef> = ["a", "c", "b", "d"].iter().map(|n| NodeRef::new(*n, 0)).collect();
        let mut diamond = UmrfGraph::new("diamond");
        for r in &refs {
            diamond.nodes.push(UmrfNode::new(r.name.clone(), 0));
        }
        let (a, c, b, d) = (&refs[0], &refs[1], &refs[2], &refs[3]);
        diamond.link(a, c);
        diamond.link(a, b);
        diamond.link(c, d);
        diamond.link(b, d);
        assert_eq!(
            topological_order(&diamond),
            TopoOrder::Acyclic(vec![a.clone(), b.clone(), c.clone(), d.clone()])
        );
    }
}
