//! Binary entry point; all logic lives in the library's `cli` module.

fn main() {
    std::process::exit(sfim_core::cli::main_entry() as i32);
}
