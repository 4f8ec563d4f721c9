fn main() {
    std::process::exit(safespec::cli::run(std::env::args_os()));
}
