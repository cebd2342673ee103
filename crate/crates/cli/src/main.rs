fn main() {
    std::process::exit(msof_cli::run_from(std::env::args_os()));
}
