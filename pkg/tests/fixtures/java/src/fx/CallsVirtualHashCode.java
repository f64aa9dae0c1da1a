package fx;

public class CallsVirtualHashCode {
    public int h(Runnable r) { return r.hashCode(); }
}
