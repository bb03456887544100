fn main() {
    std::process::exit(groupreg::cli::run_command(std::env::args_os()));
}
