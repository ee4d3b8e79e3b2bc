fn main() {
    std::process::exit(shadowsim_cli::main_stdio());
}
