fn main() {
    eprintln!("acceptance harness not yet implemented");
    std::process::exit(1);
}
