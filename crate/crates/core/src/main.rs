fn main() {
    let code = cns_eval::cli::run_command(std::env::args_os());
    std::process::exit(code);
}
