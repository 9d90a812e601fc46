//! Parse commands that mix text with `[x=..; y=..; yaw=..]` pose markers.

use umrf_forge::command::{parse_command, render_command};

fn main() -> anyhow::Result<()> {
    let cmd = parse_command("Check   the gauge [x=4.25; y=-1; yaw=3.14] then return to [x=0; y=0; yaw=0] the dock")?;
    println!("normalized: {}", render_command(&cmd));
    println!("text only:  {}", cmd.text());
    for (marker, referent) in cmd.markers_with_referents() {
        println!("marker {marker} -> {}", referent.unwrap_or("(none)"));
    }
    match parse_command("go to [x=1; y=two; yaw=0]") {
        Ok(_) => println!("unexpectedly parsed"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
