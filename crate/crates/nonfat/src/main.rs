//! Binary entry point for the `nonfat` command-line tool.

fn main() {
    std::process::exit(nonfat::cli::main_entry());
}
