fn main() {
    std::process::exit(vfedsec::cli::run());
}
