//! Parse a UMRF document, list its violations, and print its canonical form
//! and topological order.

use umrf_forge::umrf::{parse_graph, serialize_graph, topological_order, validate_graph, TopoOrder};

const DOC: &str = r#"{
  "graph_name": "inspect_pump",
  "umrf_actions": [
    {"name": "navigation", "id": 0, "effect": "synchronous",
     "input_parameters": {
       "x": {"pvf_type": "number", "pvf_value": 12.5},
       "y": {"pvf_type": "number", "pvf_value": -3},
       "yaw": {"pvf_type": "number", "pvf_value": 1.57}},
     "children": [{"name": "scan", "id": 0}]},
    {"name": "scan", "id": 0, "effect": "synchronous",
     "parents": [{"name": "navigation", "id": 0}]}
  ]
}"#;

fn main() -> anyhow::Result<()> {
    let graph = parse_graph(DOC)?;
    let violations = validate_graph(&graph);
    println!("violations: {}", violations.len());
    println!("{}", serialize_graph(&graph)?);
    match topological_order(&graph) {
        TopoOrder::Acyclic(order) => {
            let names: Vec<String> = order.iter().map(ToString::to_string).collect();
            println!("order: {}", names.join(" -> "));
        }
        TopoOrder::Cyclic(members) => println!("cycle through {} nodes", members.len()),
    }

    // A dangling child reference is reported, not silently dropped.
    let broken = DOC.replace(r#"{"name": "scan", "id": 0}]}"#, r#"{"name": "scan", "id": 7}]}"#);
    for v in validate_graph(&parse_graph(&broken)?) {
        println!("{}: {}", v.code.as_str(), v.message);
    }
    Ok(())
}
