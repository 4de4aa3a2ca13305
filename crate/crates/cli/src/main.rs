fn main() {
    std::process::exit(wemoe_cli::run_cli(std::env::args_os()));
}
