fn main() {
    std::process::exit(qudit_control_cli::run(std::env::args_os()));
}
