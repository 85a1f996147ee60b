//! `rgf` executable; all logic lives in `rgf::cli`.

fn main() {
    std::process::exit(rgf::cli::main_with_args(std::env::args_os()));
}
