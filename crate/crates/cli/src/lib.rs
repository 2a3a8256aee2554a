//! CLI plumbing; see `cli_run`.

pub fn cli_run(_args: Vec<String>) -> i32 {
    0
}
