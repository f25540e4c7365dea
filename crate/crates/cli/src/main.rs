//! Process entry point for the `hcal` binary.

fn main() {
    std::process::exit(hcal_cli::run());
}
