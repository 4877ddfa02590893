fn main() {
    std::process::exit(addgp_cli::main_with_exit_code());
}
