fn main() {
    std::process::exit(dap_cli::run(std::env::args_os()));
}
